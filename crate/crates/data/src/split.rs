use ddnet_core::params::fnv1a;

/// Deterministic train/eval split: ids are ranked by FNV-1a hash and the
/// lowest `eval_fraction` (rounded) go to evaluation. Both halves come back
/// in lexicographic order.
pub fn split_ids(ids: &[String], eval_fraction: f64) -> (Vec<String>, Vec<String>) {
    let mut ranked: Vec<&String> = ids.iter().collect();
    ranked.sort_by_key(|id| (fnv1a(id.as_bytes()), id.as_str()));
    let n_eval = ((ids.len() as f64) * eval_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut eval: Vec<String> = ranked[..n_eval].iter().map(|s| s.to_string()).collect();
    let mut train: Vec<String> = ranked[n_eval..].iter().map(|s| s.to_string()).collect();
    eval.sort();
    train.sort();
    (train, eval)
}
