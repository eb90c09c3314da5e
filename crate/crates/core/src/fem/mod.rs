//! Finite element machinery for bilinear elements on structured grids.

mod assembly;
mod mask;
mod quadrature;
mod sparse;

pub(crate) use assembly::physical_gradients;
pub use assembly::{
    assemble_adjoint_operator, assemble_advection_diffusion, assemble_laplacian, assemble_mass,
    assemble_measurement_mass, assemble_relaxed_load, assemble_source_load, assemble_state_operator, ModelCoefficients,
    Velocity,
};
pub use mask::{MeasurementMask, Rect};
pub use quadrature::{
    gauss_legendre_unit, high_order_rule, is_cut, low_order_rule, select_quadrature, QuadratureRule, HIGH_ORDER,
    LOW_ORDER,
};
pub use sparse::SparseOperator;
