pub mod coding;
pub mod gradcheck;
