//! Permutation-invariant reductions over index groups.
//!
//! These kernels implement both aggregation stages: parallel edges reduced at
//! their artificial node, and per-neighbour messages reduced at the target
//! node. Groups reference rows of a value matrix by index, so reducing never
//! copies features into per-group buffers.

use std::cell::Cell;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partition of item indices into (possibly empty) groups, stored CSR-style.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Groups {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Groups {
    pub fn from_lists<I, L>(lists: I) -> Self
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[usize]>,
    {
        let mut offsets = vec![0];
        let mut members = Vec::new();
        for l in lists {
            members.extend_from_slice(l.as_ref());
            offsets.push(members.len());
        }
        Self { offsets, members }
    }

    /// Groups from a per-item group id; items keep ascending order inside
    /// each group.
    pub fn from_assignment(assignment: &[usize], num_groups: usize) -> Self {
        let mut counts = vec![0usize; num_groups + 1];
        for &g in assignment {
            counts[g + 1] += 1;
        }
        for i in 0..num_groups {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut members = vec![0; assignment.len()];
        for (item, &g) in assignment.iter().enumerate() {
            members[cursor[g]] = item;
            cursor[g] += 1;
        }
        Self { offsets, members }
    }

    /// Contiguous groups of the given sizes over items `0..Σ sizes`.
    pub fn contiguous(sizes: &[usize]) -> Self {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let members = (0..*offsets.last().unwrap()).collect();
        Self { offsets, members }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(move |g| self.group(g))
    }
}

/// Values together with the groups that index into them.
#[derive(Debug, Clone, Copy)]
pub struct GroupedFeatures<'a> {
    pub values: ArrayView2<'a, f64>,
    pub groups: &'a Groups,
}

impl<'a> GroupedFeatures<'a> {
    pub fn new(values: ArrayView2<'a, f64>, groups: &'a Groups) -> Self {
        Self { values, groups }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Sum,
    Mean,
    Min,
    Max,
    Std,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaler {
    Identity,
    Amplification,
    Attenuation,
}

/// Principal-neighbourhood style aggregation: several statistics, each
/// multiplied by several log-degree scalers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnaSpec {
    pub statistics: Vec<Statistic>,
    pub scalers: Vec<Scaler>,
    /// Mean of `ln(degree + 1)` over the training graph's non-empty groups.
    pub mean_log_degree: f64,
}

impl PnaSpec {
    pub const STANDARD_STATISTICS: [Statistic; 4] =
        [Statistic::Mean, Statistic::Min, Statistic::Max, Statistic::Std];
    pub const STANDARD_SCALERS: [Scaler; 3] =
        [Scaler::Identity, Scaler::Amplification, Scaler::Attenuation];

    pub fn new(
        statistics: Vec<Statistic>,
        scalers: Vec<Scaler>,
        mean_log_degree: f64,
    ) -> Result<Self> {
        let spec = Self {
            statistics,
            scalers,
            mean_log_degree,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// mean, min, max, std combined with identity, amplification, attenuation.
    pub fn standard(mean_log_degree: f64) -> Self {
        Self {
            statistics: Self::STANDARD_STATISTICS.to_vec(),
            scalers: Self::STANDARD_SCALERS.to_vec(),
            mean_log_degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.statistics.is_empty() {
            return Err(Error::Config("pna needs at least one statistic".into()));
        }
        if self.scalers.is_empty() {
            return Err(Error::Config("pna needs at least one scaler".into()));
        }
        let needs_degree = self.scalers.iter().any(|s| *s != Scaler::Identity);
        if needs_degree && !(self.mean_log_degree.is_finite() && self.mean_log_degree > 0.0) {
            return Err(Error::Config(format!(
                "pna degree scalers need a positive mean log-degree, got {}",
                self.mean_log_degree
            )));
        }
        Ok(())
    }
}

/// Choice of aggregation function for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AggSpec {
    Sum,
    Mean,
    Max,
    Min,
    Std,
    Pna(PnaSpec),
}

impl AggSpec {
    pub fn output_width(&self, d: usize) -> usize {
        match self {
            AggSpec::Pna(p) => d * p.statistics.len() * p.scalers.len(),
            _ => d,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggSpec::Sum => "sum",
            AggSpec::Mean => "mean",
            AggSpec::Max => "max",
            AggSpec::Min => "min",
            AggSpec::Std => "std",
            AggSpec::Pna(_) => "pna",
        }
    }

    fn single(&self) -> Option<Statistic> {
        match self {
            AggSpec::Sum => Some(Statistic::Sum),
            AggSpec::Mean => Some(Statistic::Mean),
            AggSpec::Max => Some(Statistic::Max),
            AggSpec::Min => Some(Statistic::Min),
            AggSpec::Std => Some(Statistic::Std),
            AggSpec::Pna(_) => None,
        }
    }
}

thread_local! {
    static REDUCE_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread count of scalar item visits performed by reductions.
pub mod reduce_ops {
    use super::REDUCE_OPS;

    pub fn reset() {
        REDUCE_OPS.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        REDUCE_OPS.with(|c| c.get())
    }

    pub(super) fn add(n: usize) {
        REDUCE_OPS.with(|c| c.set(c.get() + n as u64));
    }
}

/// Amplification and attenuation factors for a group of `degree` items.
pub fn pna_scalers(degree: usize, mean_log_degree: f64) -> Result<(f64, f64)> {
    if degree == 0 {
        return Err(Error::Precondition(
            "degree scalers are undefined for empty groups".into(),
        ));
    }
    if !(mean_log_degree.is_finite() && mean_log_degree > 0.0) {
        return Err(Error::Precondition(format!(
            "mean log-degree must be positive, got {mean_log_degree}"
        )));
    }
    let amp = ((degree + 1) as f64).ln() / mean_log_degree;
    Ok((amp, 1.0 / amp))
}

/// Mean of `ln(d + 1)` over the non-zero degrees; `None` if all are zero.
pub fn mean_log_degree<I: IntoIterator<Item = usize>>(degrees: I) -> Option<f64> {
    let (sum, n) = degrees
        .into_iter()
        .filter(|&d| d > 0)
        .fold((0.0, 0usize), |(s, n), d| (s + ((d + 1) as f64).ln(), n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn scale_factor(scaler: Scaler, degree: usize, mean_log_degree: f64) -> Result<f64> {
    Ok(match scaler {
        Scaler::Identity => 1.0,
        Scaler::Amplification => pna_scalers(degree, mean_log_degree)?.0,
        Scaler::Attenuation => pna_scalers(degree, mean_log_degree)?.1,
    })
}

fn group_mean(values: &ArrayView2<'_, f64>, members: &[usize], c: usize) -> f64 {
    let mut s = 0.0;
    for &i in members {
        s += values[[i, c]];
    }
    s / members.len() as f64
}

fn statistic(stat: Statistic, values: &ArrayView2<'_, f64>, members: &[usize], c: usize) -> f64 {
    match stat {
        Statistic::Sum => members.iter().fold(0.0, |s, &i| s + values[[i, c]]),
        Statistic::Mean => group_mean(values, members, c),
        Statistic::Max => members
            .iter()
            .fold(f64::NEG_INFINITY, |m, &i| m.max(values[[i, c]])),
        Statistic::Min => members
            .iter()
            .fold(f64::INFINITY, |m, &i| m.min(values[[i, c]])),
        Statistic::Std => {
            let mu = group_mean(values, members, c);
            let mut ss = 0.0;
            for &i in members {
                let d = values[[i, c]] - mu;
                ss += d * d;
            }
            (ss / members.len() as f64).max(0.0).sqrt()
        }
    }
}

/// Index of the extreme element; ties go to the lowest item index.
fn arg_extreme(values: &ArrayView2<'_, f64>, members: &[usize], c: usize, max: bool) -> usize {
    let mut best = members[0];
    for &i in &members[1..] {
        let (v, b) = (values[[i, c]], values[[best, c]]);
        let better = if max { v > b } else { v < b };
        if better || (v == b && i < best) {
            best = i;
        }
    }
    best
}

/// Accumulate `upstream * d stat / d values` into `grad`.
fn statistic_backward(
    stat: Statistic,
    values: &ArrayView2<'_, f64>,
    members: &[usize],
    c: usize,
    upstream: f64,
    grad: &mut ArrayViewMut2<'_, f64>,
) {
    if upstream == 0.0 {
        return;
    }
    match stat {
        Statistic::Sum => {
            for &i in members {
                grad[[i, c]] += upstream;
            }
        }
        Statistic::Mean => {
            let g = upstream / members.len() as f64;
            for &i in members {
                grad[[i, c]] += g;
            }
        }
        Statistic::Max | Statistic::Min => {
            let i = arg_extreme(values, members, c, stat == Statistic::Max);
            grad[[i, c]] += upstream;
        }
        Statistic::Std => {
            let sd = statistic(Statistic::Std, values, members, c);
            if sd > 0.0 {
                let mu = group_mean(values, members, c);
                let k = upstream / (members.len() as f64 * sd);
                for &i in members {
                    grad[[i, c]] += k * (values[[i, c]] - mu);
                }
            }
        }
    }
}

fn check_degrees(gf: &GroupedFeatures<'_>, degrees: Option<&[usize]>) -> Result<()> {
    if let Some(deg) = degrees {
        if deg.len() != gf.groups.len() {
            return Err(Error::Shape(format!(
                "{} degrees for {} groups",
                deg.len(),
                gf.groups.len()
            )));
        }
    }
    Ok(())
}

fn reduce_group(
    spec: &AggSpec,
    values: &ArrayView2<'_, f64>,
    members: &[usize],
    degree: usize,
    out: &mut [f64],
) -> Result<()> {
    let d = values.ncols();
    reduce_ops::add(members.len() * d);
    match spec.single() {
        Some(stat) => {
            for (c, o) in out.iter_mut().enumerate() {
                *o = statistic(stat, values, members, c);
            }
        }
        None => {
            let AggSpec::Pna(p) = spec else { unreachable!() };
            let block = d * p.statistics.len();
            let mut base = vec![0.0; block];
            for (si, &stat) in p.statistics.iter().enumerate() {
                for c in 0..d {
                    base[si * d + c] = statistic(stat, values, members, c);
                }
            }
            for (ki, &scaler) in p.scalers.iter().enumerate() {
                let f = scale_factor(scaler, degree, p.mean_log_degree)?;
                for (o, b) in out[ki * block..(ki + 1) * block].iter_mut().zip(&base) {
                    *o = f * b;
                }
            }
        }
    }
    Ok(())
}

/// Reduce every group; all groups must be non-empty unless `spec` is `Sum`.
///
/// `degrees` overrides the group sizes fed to degree scalers.
pub fn segment_reduce(
    spec: &AggSpec,
    gf: GroupedFeatures<'_>,
    degrees: Option<&[usize]>,
) -> Result<Array2<f64>> {
    check_degrees(&gf, degrees)?;
    if !matches!(spec, AggSpec::Sum) {
        if let Some(g) = (0..gf.groups.len()).find(|&g| gf.groups.group(g).is_empty()) {
            return Err(Error::Precondition(format!(
                "group {g} is empty; {} needs at least one item",
                spec.name()
            )));
        }
    }
    if let AggSpec::Pna(p) = spec {
        p.validate()?;
    }
    let width = spec.output_width(gf.values.ncols());
    let mut out = Array2::zeros((gf.groups.len(), width));
    for (g, members) in gf.groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let degree = degrees.map_or(members.len(), |d| d[g]);
        let row = out.row_mut(g).into_slice().expect("standard layout");
        reduce_group(spec, &gf.values, members, degree, row)?;
    }
    Ok(out)
}

/// Like [`segment_reduce`], but empty groups produce `default` (zeros when
/// `None`) instead of an error.
pub fn reduce_or_default(
    spec: &AggSpec,
    gf: GroupedFeatures<'_>,
    degrees: Option<&[usize]>,
    default: Option<ArrayView1<'_, f64>>,
) -> Result<Array2<f64>> {
    check_degrees(&gf, degrees)?;
    if let AggSpec::Pna(p) = spec {
        p.validate()?;
    }
    let width = spec.output_width(gf.values.ncols());
    if let Some(def) = &default {
        if def.len() != width {
            return Err(Error::Shape(format!(
                "default of width {} for output width {width}",
                def.len()
            )));
        }
    }
    let mut out = Array2::zeros((gf.groups.len(), width));
    for (g, members) in gf.groups.iter().enumerate() {
        if members.is_empty() {
            if let Some(def) = &default {
                out.row_mut(g).assign(def);
            }
            continue;
        }
        let degree = degrees.map_or(members.len(), |d| d[g]);
        let row = out.row_mut(g).into_slice().expect("standard layout");
        reduce_group(spec, &gf.values, members, degree, row)?;
    }
    Ok(out)
}

/// Adjoint of [`segment_reduce`] / [`reduce_or_default`]: accumulates the
/// gradient with respect to `gf.values` into `grad`. Empty groups contribute
/// nothing. Max/min route to the lowest-index extreme element.
pub fn segment_reduce_backward(
    spec: &AggSpec,
    gf: GroupedFeatures<'_>,
    degrees: Option<&[usize]>,
    upstream: ArrayView2<'_, f64>,
    grad: &mut Array2<f64>,
) -> Result<()> {
    check_degrees(&gf, degrees)?;
    let d = gf.values.ncols();
    if upstream.nrows() != gf.groups.len() || upstream.ncols() != spec.output_width(d) {
        return Err(Error::Shape(format!(
            "upstream {:?} for {} groups of output width {}",
            upstream.dim(),
            gf.groups.len(),
            spec.output_width(d)
        )));
    }
    if grad.dim() != gf.values.dim() {
        return Err(Error::Shape(format!(
            "gradient buffer {:?} for values {:?}",
            grad.dim(),
            gf.values.dim()
        )));
    }
    let mut gview = grad.view_mut();
    for (g, members) in gf.groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        match spec.single() {
            Some(stat) => {
                for c in 0..d {
                    statistic_backward(stat, &gf.values, members, c, upstream[[g, c]], &mut gview);
                }
            }
            None => {
                let AggSpec::Pna(p) = spec else { unreachable!() };
                let degree = degrees.map_or(members.len(), |d| d[g]);
                let block = d * p.statistics.len();
                for (ki, &scaler) in p.scalers.iter().enumerate() {
                    let f = scale_factor(scaler, degree, p.mean_log_degree)?;
                    for (si, &stat) in p.statistics.iter().enumerate() {
                        for c in 0..d {
                            let u = f * upstream[[g, ki * block + si * d + c]];
                            statistic_backward(stat, &gf.values, members, c, u, &mut gview);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn reduce(spec: &AggSpec, values: Array2<f64>, sizes: &[usize]) -> Array2<f64> {
        let groups = Groups::contiguous(sizes);
        segment_reduce(spec, GroupedFeatures::new(values.view(), &groups), None).unwrap()
    }

    #[test]
    fn sum_of_two_rows() {
        let out = reduce(&AggSpec::Sum, array![[1.0, 2.0], [3.0, 4.0]], &[2]);
        assert_eq!(out, array![[4.0, 6.0]]);
    }

    #[test]
    fn singleton_group_identity() {
        for spec in [AggSpec::Sum, AggSpec::Mean, AggSpec::Max, AggSpec::Min] {
            assert_eq!(reduce(&spec, array![[7.0, -2.0]], &[1]), array![[7.0, -2.0]]);
        }
        assert_eq!(reduce(&AggSpec::Std, array![[7.0, -2.0]], &[1]), array![[0.0, 0.0]]);
    }

    #[test]
    fn pna_statistics_follow_requested_order() {
        let spec = AggSpec::Pna(
            PnaSpec::new(
                vec![Statistic::Mean, Statistic::Max, Statistic::Min, Statistic::Std],
                vec![Scaler::Identity],
                1.0,
            )
            .unwrap(),
        );
        let out = reduce(&spec, array![[1.0], [3.0]], &[2]);
        assert_eq!(out, array![[2.0, 3.0, 1.0, 1.0]]);
    }

    #[test]
    fn pna_scaler_blocks() {
        let spec = AggSpec::Pna(PnaSpec::standard(2f64.ln()));
        let out = reduce(&spec, array![[1.0], [3.0], [5.0]], &[3]);
        // degree 3 -> amplification ln4/ln2 = 2, attenuation 0.5
        let base = [3.0, 1.0, 5.0, (8.0f64 / 3.0).sqrt()];
        let expected: Vec<f64> = [1.0, 2.0, 0.5]
            .iter()
            .flat_map(|f| base.iter().map(move |b| f * b))
            .collect();
        assert_eq!(out.ncols(), 12);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_std() {
        assert_eq!(reduce(&AggSpec::Std, array![[2.0], [2.0], [2.0]], &[3]), array![[0.0]]);
    }

    #[test]
    fn empty_group_is_precondition_error_except_for_sum() {
        let groups = Groups::contiguous(&[0, 1]);
        let v = array![[1.0]];
        let gf = GroupedFeatures::new(v.view(), &groups);
        assert!(matches!(
            segment_reduce(&AggSpec::Max, gf, None),
            Err(Error::Precondition(_))
        ));
        assert_eq!(segment_reduce(&AggSpec::Sum, gf, None).unwrap(), array![[0.0], [1.0]]);
    }

    #[test]
    fn defaults_for_empty_groups() {
        let v = Array2::<f64>::zeros((0, 2));
        let groups = Groups::contiguous(&[0, 0, 0]);
        let out =
            reduce_or_default(&AggSpec::Max, GroupedFeatures::new(v.view(), &groups), None, None)
                .unwrap();
        assert_eq!(out, Array2::<f64>::zeros((3, 2)));

        let v = array![[4.0, 5.0]];
        let groups = Groups::from_lists([vec![], vec![0]]);
        let def = Array1::from(vec![-1.0, -1.0]);
        let out = reduce_or_default(
            &AggSpec::Mean,
            GroupedFeatures::new(v.view(), &groups),
            None,
            Some(def.view()),
        )
        .unwrap();
        assert_eq!(out, array![[-1.0, -1.0], [4.0, 5.0]]);
    }

    #[test]
    fn sum_default_matches_scatter_into_zeros() {
        let v = array![[1.0], [2.0], [3.0]];
        let groups = Groups::from_assignment(&[2, 0, 2], 4);
        let gf = GroupedFeatures::new(v.view(), &groups);
        let a = reduce_or_default(&AggSpec::Sum, gf, None, None).unwrap();
        let mut scattered = Array2::<f64>::zeros((4, 1));
        for (item, g) in [2usize, 0, 2].iter().enumerate() {
            scattered[[*g, 0]] += v[[item, 0]];
        }
        assert_eq!(a, scattered);
    }

    #[test]
    fn pna_scaler_values() {
        let l2 = 2f64.ln();
        let (a, t) = pna_scalers(1, l2).unwrap();
        assert!((a - 1.0).abs() < 1e-15 && (t - 1.0).abs() < 1e-15);
        let (a, t) = pna_scalers(3, l2).unwrap();
        assert!((a - 2.0).abs() < 1e-15 && (t - 0.5).abs() < 1e-15);
        let (a, t) = pna_scalers(6, 7f64.ln()).unwrap();
        assert_eq!((a, t), (1.0, 1.0));
        assert!(pna_scalers(0, l2).is_err());
        assert!(pna_scalers(2, 0.0).is_err());
    }

    #[test]
    fn pna_config_validation() {
        assert!(PnaSpec::new(vec![], vec![Scaler::Identity], 1.0).is_err());
        assert!(PnaSpec::new(vec![Statistic::Mean], vec![Scaler::Amplification], 0.0).is_err());
        assert!(PnaSpec::new(vec![Statistic::Mean], vec![Scaler::Identity], 0.0).is_ok());
    }

    #[test]
    fn max_backward_ties_route_to_lowest_index() {
        let v = array![[1.0], [5.0], [5.0]];
        let groups = Groups::from_lists([vec![2, 0, 1]]);
        let gf = GroupedFeatures::new(v.view(), &groups);
        let mut grad = Array2::zeros((3, 1));
        segment_reduce_backward(&AggSpec::Max, gf, None, array![[1.0]].view(), &mut grad)
            .unwrap();
        assert_eq!(grad, array![[0.0], [1.0], [0.0]]);
    }

    #[test]
    fn counter_counts_item_visits() {
        reduce_ops::reset();
        reduce(&AggSpec::Sum, Array2::zeros((5, 3)), &[2, 3]);
        assert_eq!(reduce_ops::get(), 15);
    }

    #[test]
    fn mean_log_degree_skips_empty() {
        assert_eq!(mean_log_degree([0, 1, 1]), Some(2f64.ln()));
        assert_eq!(mean_log_degree([0, 0]), None);
    }
}
