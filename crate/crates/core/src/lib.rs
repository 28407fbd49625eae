pub mod numkit;
pub mod scenegen;
pub mod encoder;
pub mod oaf;
pub mod tbm;
pub mod train;
pub mod evalkit;
pub mod experiment;
