mod idx;
mod noniid;
mod task;
mod usets;

pub use idx::{encode_idx, load_idx_dataset, parse_idx, ClassPools};
pub use noniid::{allocate_clients_noniid, MAJORITY_RANGE, MINORITY_CAP, MINORITY_FLOOR};
pub use task::{gen_gaussian_task, ClassConditionals, TaskSpec};
pub use usets::{
    build_surrogate_dataset, sample_test_set, sample_u_sets, HiddenLabels, LabeledTestSet,
    SurrogateDataset, USetCollection,
};
