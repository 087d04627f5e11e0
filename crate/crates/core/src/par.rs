//! Data-parallel helpers with a sequential fallback.
//!
//! Only independent work goes through here: evaluation shards, seeds and sweep
//! cells. With the `parallel` feature off, or with [`ExecPolicy::Sequential`],
//! everything runs in order on the calling thread. Results come back in input
//! order either way.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    /// Rayon's global pool when the `parallel` feature is on, sequential otherwise.
    #[default]
    Parallel,
    Sequential,
}

impl ExecPolicy {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// Maps `f` over `items`, failing with the first error in input order.
pub fn try_map<T, R, F>(policy: ExecPolicy, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(&f).collect::<Vec<_>>().into_iter().collect();
    }
    let _ = policy;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_policies_agree() {
        let items: Vec<u64> = (0..100).collect();
        let a = try_map(ExecPolicy::Parallel, &items, |x| Ok(x * x)).unwrap();
        let b = try_map(ExecPolicy::Sequential, &items, |x| Ok(x * x)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_error_in_order() {
        let items: Vec<u64> = (0..50).collect();
        let r = try_map(ExecPolicy::Parallel, &items, |&x| if x % 7 == 3 { Err(crate::Error::Config(format!("{x}"))) } else { Ok(x) });
        assert!(matches!(r, Err(crate::Error::Config(m)) if m == "3"));
    }
}
