#![allow(dead_code)]

pub mod fixtures;
pub mod grad;
pub mod props;
pub mod swing;
