//! Language-guided positive-pair sampling and frozen-feature evaluation.
//!
//! Pipeline: caption embeddings ([`embedstore`]) are searched for their exact
//! cosine nearest neighbors ([`knn`]), and the neighbors become positive pairs
//! for contrastive training ([`sampler`]). Reference loss kernels with
//! analytic gradients live in [`lossref`]; learned features are evaluated with
//! the weighted-kNN few-shot protocol ([`fewshot`]) and an L-BFGS logistic
//! regression probe ([`linprobe`]).

pub mod embedstore;
pub mod fewshot;
pub mod knn;
pub mod labels;
pub mod linprobe;
pub mod lossref;
pub mod sampler;
pub mod testenc;

/// Runs `f` inside a dedicated rayon pool of `threads` workers.
pub fn with_threads<T, F>(threads: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("failed to build thread pool")
        .install(f)
}

/// Worker count used when none is configured.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
