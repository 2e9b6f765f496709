//! Reference scores reported on IU X-ray for the two ablation grids.
//! Printed next to desk-scale results, never compared against them.

/// BLEU-1..4, ROUGE-L, METEOR, CIDEr.
pub const COLUMNS: [&str; 7] = ["B1", "B2", "B3", "B4", "R-L", "M", "C"];

pub const TUNING: [(&str, [f64; 7]); 11] = [
    (
        "LoRA(Llama2)",
        [0.479, 0.320, 0.233, 0.177, 0.386, 0.212, 0.489],
    ),
    (
        "LoRA(embedding)",
        [0.463, 0.302, 0.218, 0.167, 0.379, 0.207, 0.530],
    ),
    (
        "LoRA(x_proj)",
        [0.457, 0.301, 0.226, 0.162, 0.383, 0.205, 0.473],
    ),
    (
        "LoRA(dt_proj)",
        [0.458, 0.300, 0.212, 0.161, 0.378, 0.203, 0.485],
    ),
    (
        "LoRA(in_proj)",
        [0.444, 0.288, 0.205, 0.152, 0.368, 0.194, 0.431],
    ),
    (
        "LoRA(out_proj)",
        [0.456, 0.297, 0.211, 0.156, 0.374, 0.199, 0.451],
    ),
    (
        "LoRA_p(Z)",
        [0.466, 0.302, 0.213, 0.163, 0.381, 0.204, 0.467],
    ),
    (
        "LoRA_p(dt)",
        [0.458, 0.299, 0.221, 0.157, 0.387, 0.197, 0.484],
    ),
    (
        "LoRA_p(B)",
        [0.462, 0.307, 0.208, 0.165, 0.384, 0.201, 0.472],
    ),
    (
        "LoRA_p(C)",
        [0.473, 0.303, 0.217, 0.154, 0.379, 0.209, 0.466],
    ),
    (
        "LoRA_p(X)",
        [0.485, 0.311, 0.223, 0.169, 0.388, 0.216, 0.474],
    ),
];

pub const COMPONENT: [(&str, [f64; 7]); 6] = [
    ("#01", [0.480, 0.322, 0.226, 0.175, 0.383, 0.215, 0.478]),
    ("#02", [0.473, 0.311, 0.216, 0.171, 0.384, 0.210, 0.483]),
    ("#03", [0.489, 0.324, 0.231, 0.182, 0.391, 0.219, 0.490]),
    ("#04", [0.475, 0.309, 0.211, 0.161, 0.372, 0.208, 0.464]),
    ("#05", [0.471, 0.313, 0.216, 0.158, 0.374, 0.210, 0.461]),
    ("#06", [0.487, 0.325, 0.222, 0.167, 0.385, 0.226, 0.476]),
];

pub fn lookup(table: &[(&str, [f64; 7])], label: &str) -> Option<[f64; 7]> {
    table.iter().find(|(l, _)| *l == label).map(|(_, v)| *v)
}
