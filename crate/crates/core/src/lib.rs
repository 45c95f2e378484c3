pub mod adp;
pub mod experiment;
pub mod graphcost;
pub mod hierctrl;
pub mod matops;
pub mod partition;
pub mod sim;
