#![allow(dead_code)]
pub mod primitives;
pub mod tiny;
