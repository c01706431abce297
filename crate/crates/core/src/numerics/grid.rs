use crate::error::{EconError, Result};

/// Largest dimensionality the exhaustive oracle accepts.
pub const MAX_GRID_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone)]
pub struct GridBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GridBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    fn point(&self, index: usize, resolution: usize, out: &mut [f64]) {
        let mut rest = index;
        for axis in (0..out.len()).rev() {
            let k = rest % resolution;
            rest /= resolution;
            let frac = k as f64 / (resolution - 1) as f64;
            out[axis] = self.lower[axis] + frac * (self.upper[axis] - self.lower[axis]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub feasible_points: usize,
}

/// Exhaustive search over a regular grid with `resolution` points per axis.
///
/// The grid is split into contiguous chunks evaluated on worker threads; the
/// reduction keeps the lowest linear (lexicographic) index among ties, so
/// the result does not depend on the worker count.
pub fn grid_oracle<F, C>(
    objective: F,
    feasible: C,
    bounds: &GridBox,
    resolution: usize,
    sense: Sense,
    workers: usize,
) -> Result<GridResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
    C: Fn(&[f64]) -> bool + Sync,
{
    let dim = bounds.lower.len();
    assert_eq!(dim, bounds.upper.len(), "box bounds disagree in dimension");
    assert!((1..=MAX_GRID_DIM).contains(&dim), "grid oracle supports 1..=4 axes");
    assert!(resolution >= 2, "resolution must be at least 2 per axis");
    assert!(bounds.lower.iter().chain(&bounds.upper).all(|b| b.is_finite()), "box bounds must be finite");

    let total = resolution.pow(dim as u32);
    let workers = workers.clamp(1, 64).min(total);
    let chunk = total.div_ceil(workers);
    let better = |a: f64, b: f64| match sense {
        Sense::Minimize => a < b,
        Sense::Maximize => a > b,
    };

    let scan = |start: usize, end: usize| -> (Option<(usize, f64)>, usize) {
        let mut point = vec![0.0; dim];
        let mut best: Option<(usize, f64)> = None;
        let mut count = 0;
        for idx in start..end {
            bounds.point(idx, resolution, &mut point);
            if !feasible(&point) {
                continue;
            }
            let value = objective(&point);
            if !value.is_finite() {
                continue;
            }
            count += 1;
            if best.is_none_or(|(_, b)| better(value, b)) {
                best = Some((idx, value));
            }
        }
        (best, count)
    };

    let partials: Vec<(Option<(usize, f64)>, usize)> = if workers == 1 {
        vec![scan(0, total)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let start = w * chunk;
                    let end = ((w + 1) * chunk).min(total);
                    let scan = &scan;
                    scope.spawn(move || scan(start, end))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("grid worker panicked")).collect()
        })
    };

    let mut best: Option<(usize, f64)> = None;
    let mut feasible_points = 0;
    for (candidate, count) in partials {
        feasible_points += count;
        if let Some((idx, value)) = candidate {
            let replace = match best {
                None => true,
                Some((bi, bv)) => better(value, bv) || (value == bv && idx < bi),
            };
            if replace {
                best = Some((idx, value));
            }
        }
    }
    let (idx, value) = best.ok_or(EconError::NoFeasibleGridPoint)?;
    let mut point = vec![0.0; dim];
    bounds.point(idx, resolution, &mut point);
    Ok(GridResult { point, value, feasible_points })
}
