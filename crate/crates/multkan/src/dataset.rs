//! Datasets: generation from formulas, CSV import/export, input augmentation.
//!
//! CSV layout is one header row of input names followed by output names,
//! then one row per sample. Outputs occupy the trailing columns; readers
//! say how many there are.

use crate::expr::{ExprError, ExprTree};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_inputs: Array2<f64>,
    pub train_labels: Array2<f64>,
    pub test_inputs: Array2<f64>,
    pub test_labels: Array2<f64>,
    pub input_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        train_inputs: Array2<f64>,
        train_labels: Array2<f64>,
        test_inputs: Array2<f64>,
        test_labels: Array2<f64>,
        input_names: Vec<String>,
    ) -> Result<Self, DatasetError> {
        if train_inputs.ncols() != input_names.len() || test_inputs.ncols() != input_names.len() {
            return Err(DatasetError::Shape(format!(
                "{} input names for {} train / {} test columns",
                input_names.len(),
                train_inputs.ncols(),
                test_inputs.ncols()
            )));
        }
        if train_inputs.nrows() != train_labels.nrows()
            || test_inputs.nrows() != test_labels.nrows()
        {
            return Err(DatasetError::Shape("row counts of inputs and labels differ".into()));
        }
        if train_labels.ncols() != test_labels.ncols() {
            return Err(DatasetError::Shape("train and test label widths differ".into()));
        }
        Ok(Dataset { train_inputs, train_labels, test_inputs, test_labels, input_names })
    }

    pub fn n_inputs(&self) -> usize {
        self.input_names.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.train_labels.ncols()
    }

    /// Sample inputs uniformly per-variable and label them with the given
    /// formulas, optionally adding Gaussian label noise.
    pub fn generate(
        exprs: &[ExprTree],
        input_names: &[String],
        ranges: &[(f64, f64)],
        n_train: usize,
        n_test: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        if ranges.len() != input_names.len() {
            return Err(DatasetError::Shape(format!(
                "{} ranges for {} inputs",
                ranges.len(),
                input_names.len()
            )));
        }
        if exprs.is_empty() {
            return Err(DatasetError::Shape("no output formulas".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_std)
            .map_err(|e| DatasetError::Shape(format!("noise std: {e}")))?;
        let mut make = |n: usize| -> Result<(Array2<f64>, Array2<f64>), DatasetError> {
            let mut x = Array2::zeros((n, input_names.len()));
            let mut y = Array2::zeros((n, exprs.len()));
            for s in 0..n {
                for (d, &(lo, hi)) in ranges.iter().enumerate() {
                    x[[s, d]] = if lo == hi { lo } else { rng.gen_range(lo..hi) };
                }
                let row: Vec<f64> = x.row(s).to_vec();
                for (k, e) in exprs.iter().enumerate() {
                    let mut v = e.eval(&row, input_names)?;
                    if noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    y[[s, k]] = v;
                }
            }
            Ok((x, y))
        };
        let (train_inputs, train_labels) = make(n_train)?;
        let (test_inputs, test_labels) = make(n_test)?;
        Dataset::new(train_inputs, train_labels, test_inputs, test_labels, input_names.to_vec())
    }

    /// Append derived input columns computed from the existing inputs.
    /// Formulas are applied in order, so later ones can use earlier results.
    pub fn augment(&mut self, new_names: &[String], formulas: &[ExprTree]) -> Result<(), DatasetError> {
        if new_names.len() != formulas.len() {
            return Err(DatasetError::Shape(format!(
                "{} names for {} formulas",
                new_names.len(),
                formulas.len()
            )));
        }
        for (name, expr) in new_names.iter().zip(formulas) {
            for inputs in [&mut self.train_inputs, &mut self.test_inputs] {
                let n = inputs.nrows();
                let mut grown = Array2::zeros((n, inputs.ncols() + 1));
                for s in 0..n {
                    let row: Vec<f64> = inputs.row(s).to_vec();
                    let v = expr.eval(&row, &self.input_names)?;
                    for (d, &old) in row.iter().enumerate() {
                        grown[[s, d]] = old;
                    }
                    grown[[s, inputs.ncols()]] = v;
                }
                *inputs = grown;
            }
            self.input_names.push(name.clone());
        }
        Ok(())
    }

    /// Keep only the named input columns, in their current order.
    pub fn select_inputs(&mut self, names: &[String]) -> Result<(), DatasetError> {
        let mut keep = Vec::new();
        for n in names {
            let idx = self
                .input_names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| DatasetError::Shape(format!("no input named `{n}`")))?;
            keep.push(idx);
        }
        for inputs in [&mut self.train_inputs, &mut self.test_inputs] {
            let n = inputs.nrows();
            let mut shrunk = Array2::zeros((n, keep.len()));
            for s in 0..n {
                for (d, &src) in keep.iter().enumerate() {
                    shrunk[[s, d]] = inputs[[s, src]];
                }
            }
            *inputs = shrunk;
        }
        self.input_names = names.to_vec();
        Ok(())
    }

    fn block_to_csv(inputs: &Array2<f64>, labels: &Array2<f64>, names: &[String]) -> String {
        let mut out = String::new();
        let headers: Vec<String> = names
            .iter()
            .cloned()
            .chain((1..=labels.ncols()).map(|k| format!("y{k}")))
            .collect();
        out.push_str(&headers.join(","));
        out.push('\n');
        for s in 0..inputs.nrows() {
            let row: Vec<String> = inputs
                .row(s)
                .iter()
                .chain(labels.row(s).iter())
                .map(|v| format!("{v}"))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    fn block_from_csv(text: &str, n_outputs: usize) -> Result<(Array2<f64>, Array2<f64>, Vec<String>), DatasetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| DatasetError::Csv("empty file".into()))?;
        let cols: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        if cols.len() <= n_outputs {
            return Err(DatasetError::Csv(format!(
                "{} columns cannot hold {n_outputs} outputs",
                cols.len()
            )));
        }
        let n_in = cols.len() - n_outputs;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut rows = 0;
        for (lineno, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(DatasetError::Csv(format!(
                    "row {}: {} fields, expected {}",
                    lineno + 2,
                    vals.len(),
                    cols.len()
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                let parsed: f64 = v.trim().parse().map_err(|_| {
                    DatasetError::Csv(format!("row {}: bad number `{v}`", lineno + 2))
                })?;
                if c < n_in {
                    xs.push(parsed);
                } else {
                    ys.push(parsed);
                }
            }
            rows += 1;
        }
        let x = Array2::from_shape_vec((rows, n_in), xs)
            .map_err(|e| DatasetError::Csv(e.to_string()))?;
        let y = Array2::from_shape_vec((rows, n_outputs), ys)
            .map_err(|e| DatasetError::Csv(e.to_string()))?;
        Ok((x, y, cols[..n_in].to_vec()))
    }

    /// Write `<stem>.train.csv` and `<stem>.test.csv`.
    pub fn save_csv(&self, stem: &Path) -> Result<(), DatasetError> {
        let train = Self::block_to_csv(&self.train_inputs, &self.train_labels, &self.input_names);
        let test = Self::block_to_csv(&self.test_inputs, &self.test_labels, &self.input_names);
        std::fs::write(sibling(stem, "train.csv"), train)?;
        std::fs::write(sibling(stem, "test.csv"), test)?;
        Ok(())
    }

    pub fn load_csv(stem: &Path, n_outputs: usize) -> Result<Self, DatasetError> {
        let train = std::fs::read_to_string(sibling(stem, "train.csv"))?;
        let test = std::fs::read_to_string(sibling(stem, "test.csv"))?;
        let (train_inputs, train_labels, names) = Self::block_from_csv(&train, n_outputs)?;
        let (test_inputs, test_labels, names2) = Self::block_from_csv(&test, n_outputs)?;
        if names != names2 {
            return Err(DatasetError::Csv("train and test headers differ".into()));
        }
        Dataset::new(train_inputs, train_labels, test_inputs, test_labels, names)
    }
}

fn sibling(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    stem.with_file_name(name)
}
