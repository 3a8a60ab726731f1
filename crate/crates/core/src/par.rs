//! Data-parallel helpers. With the `parallel` feature these fan out over the
//! rayon pool; without it they run the same closures in order on the calling
//! thread. Output order always matches input order, so reductions done by the
//! caller over the returned vectors are deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    items.par_iter_mut().for_each(f)
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    F: Fn(&mut T),
{
    items.iter_mut().for_each(f)
}

/// Mutating map that collects one result per item, in input order.
#[cfg(feature = "parallel")]
pub fn map_mut_collect<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> R + Sync + Send,
{
    items.par_iter_mut().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_mut_collect<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    F: Fn(&mut T) -> R,
{
    items.iter_mut().map(f).collect()
}

/// Fallible variant of [`for_each_mut`]; the first error in input order wins.
pub fn try_for_each_mut<T, E, F>(items: &mut [T], f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(&mut T) -> Result<(), E> + Sync + Send,
{
    let mut results: Vec<Option<E>> = Vec::with_capacity(items.len());
    #[cfg(feature = "parallel")]
    items.par_iter_mut().map(|it| f(it).err()).collect_into_vec(&mut results);
    #[cfg(not(feature = "parallel"))]
    results.extend(items.iter_mut().map(|it| f(it).err()));
    match results.into_iter().flatten().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
