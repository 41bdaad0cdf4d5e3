pub mod adam;
pub mod mat;
pub mod params;
pub mod transformer;
