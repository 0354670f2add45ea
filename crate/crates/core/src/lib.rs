pub mod space;
pub mod order;
pub mod lp;
pub mod catalog;
pub mod diagnostics;
pub mod comonotone;
pub mod sharing;
pub mod capital;
