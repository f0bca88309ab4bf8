//! Multiplicative Kolmogorov-Arnold networks.

pub mod attribution;
pub mod conserved;
pub mod dataset;
pub mod expr;
pub mod kanpiler;
pub mod model;
pub mod modularity;
pub mod plot;
pub mod primitives;
pub mod spline;
pub mod symbolic;
pub mod trainer;
pub mod versioning;

pub use plot::network_dot;

pub use conserved::{
    conserved_quantity_loss, input_gradient, oscillator2d_span_residual, train_conserved,
    ConservedError, ConservedReport, ConservedTrainConfig, VectorField,
};

pub use attribution::{compute_attribution, prune, prune_inputs, AttributionScores};
pub use dataset::Dataset;
pub use expr::{parse_formula, ExprTree};
pub use kanpiler::{compile_formula, compile_to_kan, compile_trees, CompileError};
pub use model::{EdgeFunction, EdgeId, EdgeMode, GridSpec, MultKanModel, WidthSpec};
pub use modularity::{
    auto_swap, estimate_hessian, test_general_separability, test_separability, test_symmetry,
    tree_convert, Annotation, FunctionHandle, ModularityError, ModularityTree, SepMode,
    TestConfig, TreeNode,
};
pub use primitives::{Primitive, PrimitiveLibrary};
pub use spline::{Grid, SplineCurve};
pub use symbolic::{
    auto_symbolic, extract_formula, fix_symbolic, suggest_symbolic, unfix_symbolic, AutoReport,
    SymbolicError, SymbolicFitResult,
};
pub use trainer::{train, TrainConfig, TrainLog};
pub use versioning::{CheckpointStore, VersionError, VersionId};
