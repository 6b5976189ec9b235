pub mod eval_cmd;
pub mod gen_data;
pub mod probe_vc;
pub mod report;
pub mod train;
