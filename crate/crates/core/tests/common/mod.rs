#![allow(dead_code)]

pub mod gradcases;
