pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod trainer;
