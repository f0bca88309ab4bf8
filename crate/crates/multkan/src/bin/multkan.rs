//! MultKAN workspace commands: compile formulas, generate and augment
//! datasets, train, inspect, simplify, and version models.
//!
//! Exit codes: 0 success, 2 usage error, 3 numeric failure (divergence,
//! inconclusive tests, domain violations), 4 I/O trouble.

use clap::{Args, Parser, Subcommand};
use multkan::attribution::{
    compute_attribution, prune, prune_inputs, AttributionError, AttributionScores, KeepRule,
    DEFAULT_EDGE_THRESHOLD, DEFAULT_NODE_THRESHOLD,
};
use multkan::conserved::{train_conserved, ConservedError, ConservedTrainConfig, VectorField};
use multkan::dataset::{Dataset, DatasetError};
use multkan::expr::{parse_formula, ExprError, ExprTree};
use multkan::kanpiler::{compile_trees, CompileError};
use multkan::model::{EdgeId, GridSpec, ModelError, MultKanModel, WidthSpec};
use multkan::modularity::{tree_convert, FunctionHandle, ModularityError, TestConfig};
use multkan::plot::network_dot;
use multkan::primitives::PrimitiveLibrary;
use multkan::symbolic::{auto_symbolic, extract_formula, suggest_symbolic, SymbolicError};
use multkan::trainer::{train, OptimizerKind, TrainConfig, TrainError};
use multkan::versioning::{CheckpointStore, VersionError, VersionId};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "multkan", version, about = "MultKAN model workspace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    globals: Globals,
}

#[derive(Args)]
struct Globals {
    /// Model file (JSON).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Dataset stem; commands read/write `<stem>.train.csv` and
    /// `<stem>.test.csv`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Seed for anything stochastic; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML key=value file mirroring the train and modularity-test configs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compile formulas into an exact symbolic model, one output each.
    Compile {
        /// Formula over the declared inputs; repeat for more outputs.
        #[arg(long = "formula", required = true)]
        formulas: Vec<String>,
        /// Comma-separated input names, defining column order.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value_t = GridSpec::default().size)]
        grid: usize,
        #[arg(long, default_value_t = GridSpec::default().order)]
        order: usize,
        /// Grid box as `lo:hi`, shared by every edge.
        #[arg(long, default_value = "-1:1")]
        range: String,
    },
    /// Sample a dataset from formulas or a built-in vector field.
    GenData {
        #[arg(long = "formula")]
        formulas: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<String>,
        /// Built-in dynamical system; generates states with no labels.
        #[arg(long, conflicts_with = "formulas")]
        field: Option<String>,
        /// Per-input sampling boxes `lo:hi,lo:hi,...`; defaults to [-1,1]^d.
        #[arg(long)]
        ranges: Option<String>,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        /// Gaussian label noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Append derived input columns to a dataset.
    Augment {
        /// `name=formula` over existing columns; earlier entries are
        /// visible to later ones. Repeatable.
        #[arg(long = "aux")]
        aux: Vec<String>,
        /// Trailing label columns in the CSV.
        #[arg(long, default_value_t = 1)]
        outputs: usize,
        /// Output stem; defaults to rewriting --data in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model to a dataset, or to a conserved-quantity task.
    Train {
        /// Start from a fresh random model of this shape instead of loading
        /// --model. Levels are comma-separated, each `n` or `add:mult`,
        /// e.g. `4,0:2,1`.
        #[arg(long)]
        init: Option<String>,
        /// Train against `f·grad H = 0` for this field instead of labels.
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        outputs: Option<usize>,
        /// Where to write the trained model; defaults to --model in place.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the per-step loss history as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score nodes and edges on a batch and print input attributions.
    Attribute {
        #[arg(long, default_value_t = 1)]
        outputs: usize,
        /// Write the full score table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop weak edges and nodes, or weak input variables.
    Prune {
        #[arg(long, default_value_t = 1)]
        outputs: usize,
        #[arg(long, default_value_t = DEFAULT_NODE_THRESHOLD)]
        node_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
        edge_threshold: f64,
        /// Prune input variables below this score instead of edges/nodes.
        #[arg(long)]
        inputs_below: Option<f64>,
        /// Keep exactly these named inputs.
        #[arg(long, value_delimiter = ',', conflicts_with = "inputs_below")]
        keep: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect separability and symmetry structure as a module tree.
    Tree {
        /// Analyze a formula instead of --model.
        #[arg(long)]
        formula: Option<String>,
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<String>,
        /// Probe box `lo:hi,...`; defaults to the model grid box or [-1,1]^d.
        #[arg(long)]
        ranges: Option<String>,
        /// Write the tree as Graphviz DOT.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Reorder hidden nodes to minimize attribution-weighted wire length.
    Swap {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank symbolic candidates for one edge.
    Suggest {
        /// Edge as `layer,in_node,out_subnode`.
        #[arg(long)]
        edge: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, default_value_t = 1)]
        outputs: usize,
    },
    /// Replace every well-fit spline edge with its best primitive.
    Symbolify {
        /// Minimum r² for an edge to be converted.
        #[arg(long, default_value_t = 0.9)]
        floor: f64,
        #[arg(long, default_value_t = 1)]
        outputs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the closed-form formula of a fully symbolic model.
    Extract {
        /// Decimal places to try rounding coefficients to.
        #[arg(long, default_value_t = 3)]
        digits: u32,
    },
    /// Export the network diagram as Graphviz DOT.
    Plot {
        /// Scale edges and nodes by attribution over this dataset.
        #[arg(long, default_value_t = 1)]
        outputs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect and manipulate a checkpoint directory.
    Versions {
        #[command(subcommand)]
        action: VersionsAction,
    },
}

#[derive(Subcommand)]
enum VersionsAction {
    /// Print the commit history, one line per version.
    List {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Snapshot --model as the next version.
    Commit {
        #[arg(long)]
        dir: PathBuf,
        /// Label recorded next to the version.
        #[arg(long, default_value = "commit")]
        op: String,
    },
    /// Restore an old version into a fresh branch.
    Rewind {
        #[arg(long)]
        dir: PathBuf,
        /// Version to restore, as `major.minor`.
        version: String,
        /// Also write the restored model here (or to --model).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ExprError> for CliError {
    fn from(e: ExprError) -> Self {
        match e {
            ExprError::Parse { .. } | ExprError::UnknownIdentifier { .. } | ExprError::Unsupported(_) => {
                CliError::Usage(e.to_string())
            }
            ExprError::Domain { .. } | ExprError::DivisionByZero { .. } | ExprError::NonFinite { .. } => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } | ModelError::EdgeEval { .. } | ModelError::Spline(_) => {
                CliError::Numeric(e.to_string())
            }
            ModelError::Io(_) | ModelError::Format(_) | ModelError::FormatVersion(_) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        match e {
            CompileError::Expr(inner) => inner.into(),
            CompileError::Model(inner) => inner.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Shape(m) => CliError::Usage(m),
            DatasetError::Csv(m) => CliError::Io(m),
            DatasetError::Expr(inner) => inner.into(),
            DatasetError::Io(inner) => inner.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(m) => CliError::Usage(m),
            TrainError::Model(inner) => inner.into(),
            TrainError::Io(inner) => inner.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::EmptyBatch | AttributionError::UnknownInput(_) => {
                CliError::Usage(e.to_string())
            }
            AttributionError::Model(inner) => inner.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<SymbolicError> for CliError {
    fn from(e: SymbolicError) -> Self {
        match e {
            SymbolicError::DegenerateInput(_) => CliError::Numeric(e.to_string()),
            SymbolicError::Model(inner) => inner.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ModularityError> for CliError {
    fn from(e: ModularityError) -> Self {
        match e {
            ModularityError::BadArgument(m) => CliError::Usage(m),
            ModularityError::Inconclusive(m) | ModularityError::Eval(m) => CliError::Numeric(m),
            ModularityError::Expr(inner) => inner.into(),
            ModularityError::Model(inner) => inner.into(),
            ModularityError::Attribution(inner) => inner.into(),
        }
    }
}

impl From<ConservedError> for CliError {
    fn from(e: ConservedError) -> Self {
        match e {
            ConservedError::BadModel(m) => CliError::Usage(m),
            ConservedError::UnknownField(_) => CliError::Usage(e.to_string()),
            ConservedError::Model(inner) => inner.into(),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<VersionError> for CliError {
    fn from(e: VersionError) -> Self {
        match e {
            VersionError::UnknownVersion(_) | VersionError::BadVersionString(_) => {
                CliError::Usage(e.to_string())
            }
            VersionError::Model(inner) => inner.into(),
            _ => CliError::Io(e.to_string()),
        }
    }
}

/// Both tunable configs, merged from the --config file and --seed.
struct Settings {
    train: TrainConfig,
    test: TestConfig,
}

fn load_settings(globals: &Globals) -> Result<Settings, CliError> {
    let mut train = TrainConfig::default();
    let mut test = TestConfig::default();
    if let Some(path) = &globals.config {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        for (key, value) in table {
            apply_setting(&mut train, &mut test, &key, &value)?;
        }
    }
    if let Some(seed) = globals.seed {
        train.seed = seed;
        test.seed = seed;
    }
    Ok(Settings { train, test })
}

fn apply_setting(
    train: &mut TrainConfig,
    test: &mut TestConfig,
    key: &str,
    value: &toml::Value,
) -> Result<(), CliError> {
    let bad = |what: &str| CliError::Usage(format!("config key `{key}` wants {what}"));
    let as_usize = |v: &toml::Value| v.as_integer().map(|i| i as usize);
    let as_f64 = |v: &toml::Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
    match key {
        "steps" => train.steps = as_usize(value).ok_or_else(|| bad("an integer"))?,
        "optimizer" => {
            train.optimizer = match value.as_str() {
                Some("adam") => OptimizerKind::Adam,
                Some("lbfgs") => OptimizerKind::Lbfgs,
                _ => return Err(bad("\"adam\" or \"lbfgs\"")),
            }
        }
        "learning_rate" => train.learning_rate = as_f64(value).ok_or_else(|| bad("a number"))?,
        "lambda_l1" => train.lambda_l1 = as_f64(value).ok_or_else(|| bad("a number"))?,
        "lambda_entropy" => train.lambda_entropy = as_f64(value).ok_or_else(|| bad("a number"))?,
        "grid_update_steps" => {
            let arr = value.as_array().ok_or_else(|| bad("an integer array"))?;
            train.grid_update_steps = arr
                .iter()
                .map(|v| as_usize(v).ok_or_else(|| bad("an integer array")))
                .collect::<Result<_, _>>()?;
        }
        "batch_size" => {
            let n = as_usize(value).ok_or_else(|| bad("an integer"))?;
            train.batch_size = if n == 0 { None } else { Some(n) };
        }
        "seed" => {
            let s = value.as_integer().ok_or_else(|| bad("an integer"))? as u64;
            train.seed = s;
            test.seed = s;
        }
        "probes" => test.probes = as_usize(value).ok_or_else(|| bad("an integer"))?,
        "h" => test.h = as_f64(value).ok_or_else(|| bad("a number"))?,
        "tau" => test.tau = as_f64(value).ok_or_else(|| bad("a number"))?,
        other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

fn need_model(globals: &Globals) -> Result<&Path, CliError> {
    globals
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --model".into()))
}

fn need_data(globals: &Globals) -> Result<&Path, CliError> {
    globals
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --data".into()))
}

fn parse_range(spec: &str) -> Result<(f64, f64), CliError> {
    let err = || CliError::Usage(format!("range `{spec}` is not `lo:hi` with lo < hi"));
    let (lo, hi) = spec.split_once(':').ok_or_else(err)?;
    let lo: f64 = lo.trim().parse().map_err(|_| err())?;
    let hi: f64 = hi.trim().parse().map_err(|_| err())?;
    if !(lo < hi) {
        return Err(err());
    }
    Ok((lo, hi))
}

fn parse_ranges(spec: Option<&str>, d: usize) -> Result<Vec<(f64, f64)>, CliError> {
    match spec {
        None => Ok(vec![(-1.0, 1.0); d]),
        Some(s) => {
            let out: Vec<(f64, f64)> =
                s.split(',').map(parse_range).collect::<Result<_, _>>()?;
            if out.len() != d {
                return Err(CliError::Usage(format!(
                    "{} ranges for {d} inputs",
                    out.len()
                )));
            }
            Ok(out)
        }
    }
}

fn parse_trees(formulas: &[String], inputs: &[String]) -> Result<Vec<ExprTree>, CliError> {
    formulas
        .iter()
        .map(|f| parse_formula(f, inputs).map_err(CliError::from))
        .collect()
}

/// Forward the training inputs once so edge-level caches exist.
fn warm_cache(model: &mut MultKanModel, data: &Dataset) -> Result<(), CliError> {
    model.forward(&data.train_inputs, true)?;
    Ok(())
}

fn scores_for(
    model: &MultKanModel,
    data: &Dataset,
) -> Result<AttributionScores, CliError> {
    Ok(compute_attribution(model, &data.train_inputs)?)
}

fn save_model(model: &MultKanModel, path: &Path) -> Result<(), CliError> {
    model.save(path)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let globals = &cli.globals;
    let settings = load_settings(globals)?;
    match cli.command {
        Command::Compile { formulas, inputs, grid, order, range } => {
            let (lo, hi) = parse_range(&range)?;
            let spec = GridSpec { size: grid, order, lo, hi };
            let trees = parse_trees(&formulas, &inputs)?;
            let model = compile_trees(&trees, &inputs, spec)?;
            let path = need_model(globals)?;
            save_model(&model, path)?;
            println!(
                "compiled {} formula(s) over {} inputs into {} levels -> {}",
                formulas.len(),
                inputs.len(),
                model.n_levels(),
                path.display()
            );
            Ok(())
        }
        Command::GenData { formulas, inputs, field, ranges, n_train, n_test, noise } => {
            let stem = need_data(globals)?;
            let seed = globals.seed.unwrap_or(0);
            let data = if let Some(name) = field {
                let field = VectorField::from_name(&name)?;
                let names = field.state_names();
                let boxes = parse_ranges(ranges.as_deref(), names.len())?;
                gen_states(&names, &boxes, n_train, n_test, seed)?
            } else {
                if formulas.is_empty() || inputs.is_empty() {
                    return Err(CliError::Usage(
                        "gen-data needs --formula and --inputs, or --field".into(),
                    ));
                }
                let boxes = parse_ranges(ranges.as_deref(), inputs.len())?;
                let trees = parse_trees(&formulas, &inputs)?;
                Dataset::generate(&trees, &inputs, &boxes, n_train, n_test, noise, seed)?
            };
            data.save_csv(stem)?;
            println!(
                "wrote {} train / {} test rows, {} inputs, {} outputs -> {}.{{train,test}}.csv",
                data.train_inputs.nrows(),
                data.test_inputs.nrows(),
                data.n_inputs(),
                data.n_outputs(),
                stem.display()
            );
            Ok(())
        }
        Command::Augment { aux, outputs, out } => {
            let stem = need_data(globals)?;
            let mut data = Dataset::load_csv(stem, outputs)?;
            let mut names = Vec::new();
            let mut trees = Vec::new();
            let mut known = data.input_names.clone();
            for spec in &aux {
                let (name, formula) = spec.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("aux `{spec}` is not `name=formula`"))
                })?;
                let tree = parse_formula(formula.trim(), &known)?;
                known.push(name.trim().to_string());
                names.push(name.trim().to_string());
                trees.push(tree);
            }
            data.augment(&names, &trees)?;
            let target = out.as_deref().unwrap_or(stem);
            data.save_csv(target)?;
            println!(
                "augmented to {} inputs ({}) -> {}.{{train,test}}.csv",
                data.n_inputs(),
                data.input_names.join(","),
                target.display()
            );
            Ok(())
        }
        Command::Train { init, field, outputs, out, log } => {
            let path = need_model(globals)?;
            let stem = need_data(globals)?;
            let mut model = match init {
                Some(spec) => {
                    let pairs = parse_width(&spec)?;
                    let width = WidthSpec::from_pairs(&pairs);
                    MultKanModel::init(&width, GridSpec::default(), settings.train.seed, false)?
                }
                None => MultKanModel::load(path)?,
            };
            let target = out.as_deref().unwrap_or(path);
            match field {
                Some(name) => {
                    let field = VectorField::from_name(&name)?;
                    let data = Dataset::load_csv(stem, outputs.unwrap_or(0))?;
                    let config = ConservedTrainConfig {
                        steps: settings.train.steps,
                        learning_rate: settings.train.learning_rate,
                    };
                    let trace =
                        train_conserved(&mut model, field, &data.train_inputs, &config)?;
                    save_model(&model, target)?;
                    if let Some(log_path) = log {
                        let mut text = String::from("step,loss\n");
                        for (i, l) in trace.iter().enumerate() {
                            text.push_str(&format!("{i},{l}\n"));
                        }
                        std::fs::write(log_path, text)?;
                    }
                    println!(
                        "conserved loss {:.3e} -> {:.3e} over {} steps ({})",
                        trace[0],
                        trace.last().expect("trace never empty"),
                        config.steps,
                        field.name()
                    );
                }
                None => {
                    let data = Dataset::load_csv(stem, outputs.unwrap_or(1))?;
                    let history = train(&mut model, &data, &settings.train)?;
                    save_model(&model, target)?;
                    if let Some(log_path) = log {
                        history.save_csv(&log_path)?;
                    }
                    match history.records.last() {
                        Some(r) => println!(
                            "step {}: train rmse {:.3e}, test rmse {:.3e} -> {}",
                            r.step,
                            r.train_loss,
                            r.test_loss,
                            target.display()
                        ),
                        None => println!("no steps taken -> {}", target.display()),
                    }
                }
            }
            Ok(())
        }
        Command::Attribute { outputs, out } => {
            let path = need_model(globals)?;
            let data = Dataset::load_csv(need_data(globals)?, outputs)?;
            let model = MultKanModel::load(path)?;
            let scores = scores_for(&model, &data)?;
            for (name, a) in model.input_names.iter().zip(scores.input_scores()) {
                println!("{name}\t{a:.6}");
            }
            if let Some(out) = out {
                std::fs::write(out, scores.to_csv())?;
            }
            Ok(())
        }
        Command::Prune { outputs, node_threshold, edge_threshold, inputs_below, keep, out } => {
            let path = need_model(globals)?;
            let data = Dataset::load_csv(need_data(globals)?, outputs)?;
            let model = MultKanModel::load(path)?;
            let scores = scores_for(&model, &data)?;
            let target = out.as_deref().unwrap_or(path);
            if inputs_below.is_some() || keep.is_some() {
                let rule = match (&inputs_below, &keep) {
                    (Some(t), _) => KeepRule::Threshold(*t),
                    (None, Some(names)) => KeepRule::Names(names),
                    (None, None) => unreachable!(),
                };
                let (pruned, kept) = prune_inputs(&model, &scores, rule)?;
                save_model(&pruned, target)?;
                println!("kept inputs: {}", kept.join(","));
            } else {
                let pruned = prune(&model, &scores, node_threshold, edge_threshold)?;
                save_model(&pruned, target)?;
                let active: usize = pruned
                    .edge_ids()
                    .into_iter()
                    .filter(|&id| pruned.edge_at(id).expect("valid id").is_active())
                    .count();
                println!("pruned model has {active} active edges -> {}", target.display());
            }
            Ok(())
        }
        Command::Tree { formula, inputs, ranges, dot } => {
            let (handle, names) = match (&formula, globals.model.as_deref()) {
                (Some(f), _) => {
                    if inputs.is_empty() {
                        return Err(CliError::Usage("tree --formula needs --inputs".into()));
                    }
                    let tree = parse_formula(f, &inputs)?;
                    let boxes = parse_ranges(ranges.as_deref(), inputs.len())?;
                    (FunctionHandle::from_tree(&tree, &inputs, boxes)?, inputs.clone())
                }
                (None, Some(path)) => {
                    let model = MultKanModel::load(path)?;
                    let handle = FunctionHandle::from_model(&model)?;
                    (handle, model.input_names.clone())
                }
                (None, None) => {
                    return Err(CliError::Usage("tree needs --formula or --model".into()))
                }
            };
            let tree = tree_convert(&handle, &settings.test)?;
            print!("{}", tree.to_text(&names));
            if let Some(dot_path) = dot {
                std::fs::write(dot_path, tree.to_dot(&names))?;
            }
            Ok(())
        }
        Command::Swap { out } => {
            let path = need_model(globals)?;
            let model = MultKanModel::load(path)?;
            let (swapped, _, trace) = multkan::modularity::auto_swap(&model)?;
            let target = out.as_deref().unwrap_or(path);
            save_model(&swapped, target)?;
            let steps: Vec<String> = trace.iter().map(|c| format!("{c:.4}")).collect();
            println!("connection cost: {}", steps.join(" -> "));
            Ok(())
        }
        Command::Suggest { edge, top, outputs } => {
            let path = need_model(globals)?;
            let data = Dataset::load_csv(need_data(globals)?, outputs)?;
            let mut model = MultKanModel::load(path)?;
            warm_cache(&mut model, &data)?;
            let id = parse_edge(&edge)?;
            let library = PrimitiveLibrary::default();
            let fits = suggest_symbolic(&model, id, &library, top)?;
            println!("name\tr2\tcomplexity\t(a,b,c,d)");
            for f in fits {
                println!(
                    "{}\t{:.6}\t{}\t({:.4},{:.4},{:.4},{:.4})",
                    f.name, f.r2, f.complexity, f.a, f.b, f.c, f.d
                );
            }
            Ok(())
        }
        Command::Symbolify { floor, outputs, out } => {
            let path = need_model(globals)?;
            let data = Dataset::load_csv(need_data(globals)?, outputs)?;
            let mut model = MultKanModel::load(path)?;
            warm_cache(&mut model, &data)?;
            let library = PrimitiveLibrary::default();
            let report = auto_symbolic(&mut model, &library, floor)?;
            let target = out.as_deref().unwrap_or(path);
            save_model(&model, target)?;
            for c in &report.chosen {
                println!(
                    "({},{},{}) -> {} (r2 {:.6})",
                    c.id.layer, c.id.in_node, c.id.out_subnode, c.fit.name, c.fit.r2
                );
            }
            for (id, r2) in &report.unresolved {
                println!(
                    "({},{},{}) unresolved (best r2 {r2:.6})",
                    id.layer, id.in_node, id.out_subnode
                );
            }
            Ok(())
        }
        Command::Extract { digits } => {
            let path = need_model(globals)?;
            let model = MultKanModel::load(path)?;
            let trees = extract_formula(&model, digits)?;
            for (k, tree) in trees.iter().enumerate() {
                println!("y{} = {}", k + 1, tree.print(&model.input_names));
            }
            Ok(())
        }
        Command::Plot { outputs, out } => {
            let path = need_model(globals)?;
            let model = MultKanModel::load(path)?;
            let scores = match globals.data.as_deref() {
                Some(stem) => {
                    let data = Dataset::load_csv(stem, outputs)?;
                    Some(scores_for(&model, &data)?)
                }
                None => None,
            };
            let dot = network_dot(&model, scores.as_ref(), Some(&model.input_names));
            match out {
                Some(p) => std::fs::write(p, dot)?,
                None => print!("{dot}"),
            }
            Ok(())
        }
        Command::Versions { action } => versions(globals, action),
    }
}

fn versions(globals: &Globals, action: VersionsAction) -> Result<(), CliError> {
    match action {
        VersionsAction::List { dir } => {
            let store = CheckpointStore::open(dir)?;
            for e in store.history() {
                let parent = e.parent.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
                println!("{}\tparent {}\t{}", e.id, parent, e.op);
            }
            Ok(())
        }
        VersionsAction::Commit { dir, op } => {
            let path = need_model(globals)?;
            let model = MultKanModel::load(path)?;
            let mut store = CheckpointStore::open(dir)?;
            let id = store.commit(&model, &op)?;
            println!("committed {id}");
            Ok(())
        }
        VersionsAction::Rewind { dir, version, out } => {
            let target: VersionId = version.parse()?;
            let mut store = CheckpointStore::open(dir)?;
            let (model, id) = store.rewind(target)?;
            if let Some(path) = out.as_deref().or(globals.model.as_deref()) {
                save_model(&model, path)?;
            }
            println!("rewound {target} -> {id}");
            Ok(())
        }
    }
}

fn parse_width(spec: &str) -> Result<Vec<(usize, usize)>, CliError> {
    let err = |tok: &str| {
        CliError::Usage(format!("width level `{tok}` is not `n` or `add:mult`"))
    };
    spec.split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok.split_once(':') {
                Some((a, m)) => Ok((
                    a.trim().parse().map_err(|_| err(tok))?,
                    m.trim().parse().map_err(|_| err(tok))?,
                )),
                None => Ok((tok.parse().map_err(|_| err(tok))?, 0)),
            }
        })
        .collect()
}

fn parse_edge(spec: &str) -> Result<EdgeId, CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    let err = || CliError::Usage(format!("edge `{spec}` is not `layer,in_node,out_subnode`"));
    if parts.len() != 3 {
        return Err(err());
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|_| err()))
        .collect::<Result<_, _>>()?;
    Ok(EdgeId::new(nums[0], nums[1], nums[2]))
}

/// States for a conserved-quantity task: uniform in the box, no labels.
fn gen_states(
    names: &[String],
    boxes: &[(f64, f64)],
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| {
        Array2::from_shape_fn((n, boxes.len()), |(_, d)| {
            let (lo, hi) = boxes[d];
            rng.gen_range(lo..hi)
        })
    };
    let train = make(n_train);
    let test = make(n_test);
    let zero_train = Array2::zeros((n_train, 0));
    let zero_test = Array2::zeros((n_test, 0));
    Ok(Dataset::new(train, zero_train, test, zero_test, names.to_vec())?)
}
