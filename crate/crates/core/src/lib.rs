pub mod featstore;
pub mod kgstore;
pub mod models;
pub mod pipeline;
pub mod synthvqa;
pub mod tensorcore;
