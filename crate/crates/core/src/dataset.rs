use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::family::Family;

/// Adjacency values for all subjects and time points, stored as
/// `N × T × n × n` row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Adjacency {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl Adjacency {
    pub fn len(&self) -> usize {
        match self {
            Adjacency::U8(v) => v.len(),
            Adjacency::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        match self {
            Adjacency::U8(v) => f64::from(v[idx]),
            Adjacency::F64(v) => v[idx],
        }
    }
}

/// A population of dynamic networks: `N` subjects, each observed as `T`
/// symmetric `n × n` matrices, with `p` subject covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicNetworkDataset {
    n_subjects: usize,
    n_nodes: usize,
    n_times: usize,
    family: Family,
    adjacency: Adjacency,
    covariates: DMatrix<f64>,
    time_grid: Vec<f64>,
}

impl DynamicNetworkDataset {
    /// Validates shapes, symmetry, the zero diagonal and the family's support.
    /// Covariates are taken as given; see [`Self::standardized`].
    pub fn new(
        family: Family,
        n_nodes: usize,
        time_grid: Vec<f64>,
        adjacency: Adjacency,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let n_subjects = covariates.nrows();
        let n_times = time_grid.len();
        if n_nodes < 2 || n_times == 0 || n_subjects == 0 {
            return Err(Error::InvalidData(format!(
                "need n >= 2, T >= 1, N >= 1 (got n={n_nodes}, T={n_times}, N={n_subjects})"
            )));
        }
        let expected = n_subjects * n_times * n_nodes * n_nodes;
        if adjacency.len() != expected {
            return Err(Error::Shape(format!(
                "adjacency holds {} values, expected N*T*n*n = {expected}",
                adjacency.len()
            )));
        }
        if let Some((h, t)) = time_grid
            .iter()
            .enumerate()
            .find(|(_, t)| !(0.0..=1.0).contains(*t))
        {
            return Err(Error::InvalidData(format!("time point {h} = {t} outside [0, 1]")));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("covariates contain non-finite values".into()));
        }
        let data = Self {
            n_subjects,
            n_nodes,
            n_times,
            family,
            adjacency,
            covariates,
            time_grid,
        };
        data.check_networks()?;
        Ok(data)
    }

    fn check_networks(&self) -> Result<()> {
        let n = self.n_nodes;
        for i in 0..self.n_subjects {
            for h in 0..self.n_times {
                for j in 0..n {
                    if self.edge(i, h, j, j) != 0.0 {
                        return Err(Error::InvalidData(format!(
                            "subject {i}, time {h}: diagonal entry ({j},{j}) is nonzero"
                        )));
                    }
                    for jp in (j + 1)..n {
                        let a = self.edge(i, h, j, jp);
                        if a != self.edge(i, h, jp, j) {
                            return Err(Error::InvalidData(format!(
                                "subject {i}, time {h}: matrix not symmetric at ({j},{jp})"
                            )));
                        }
                        if !self.family.admits(a) {
                            return Err(Error::InvalidData(format!(
                                "subject {i}, time {h}: value {a} at ({j},{jp}) not valid for {}",
                                self.family
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Returns a copy whose covariate columns have mean 0 and sample
    /// standard deviation 1. Constant columns are rejected.
    pub fn standardized(mut self) -> Result<Self> {
        standardize_columns(&mut self.covariates)?;
        Ok(self)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    #[inline]
    pub fn edge(&self, subject: usize, time: usize, j: usize, jp: usize) -> f64 {
        let n = self.n_nodes;
        self.adjacency
            .value(((subject * self.n_times + time) * n + j) * n + jp)
    }

    /// Adjacency matrix of one subject at one time point.
    pub fn matrix(&self, subject: usize, time: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_nodes, self.n_nodes, |j, jp| {
            self.edge(subject, time, j, jp)
        })
    }

    /// Sub-population in the given subject order; covariates are copied as is.
    pub fn subset(&self, subjects: &[usize]) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidArgument("empty subject subset".into()));
        }
        let block = self.n_times * self.n_nodes * self.n_nodes;
        let adjacency = match &self.adjacency {
            Adjacency::U8(v) => Adjacency::U8(
                subjects
                    .iter()
                    .flat_map(|&i| v[i * block..(i + 1) * block].iter().copied())
                    .collect(),
            ),
            Adjacency::F64(v) => Adjacency::F64(
                subjects
                    .iter()
                    .flat_map(|&i| v[i * block..(i + 1) * block].iter().copied())
                    .collect(),
            ),
        };
        let covariates = DMatrix::from_fn(subjects.len(), self.n_covariates(), |r, c| {
            self.covariates[(subjects[r], c)]
        });
        Ok(Self {
            n_subjects: subjects.len(),
            n_nodes: self.n_nodes,
            n_times: self.n_times,
            family: self.family,
            adjacency,
            covariates,
            time_grid: self.time_grid.clone(),
        })
    }

    /// Subjects of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.n_nodes != other.n_nodes
            || self.time_grid != other.time_grid
            || self.family != other.family
            || self.n_covariates() != other.n_covariates()
        {
            return Err(Error::Shape("datasets differ in nodes, time grid, family or covariates".into()));
        }
        let adjacency = match (&self.adjacency, &other.adjacency) {
            (Adjacency::U8(a), Adjacency::U8(b)) => Adjacency::U8([a.as_slice(), b].concat()),
            (a, b) => Adjacency::F64((0..a.len()).map(|i| a.value(i)).chain((0..b.len()).map(|i| b.value(i))).collect()),
        };
        let covariates = DMatrix::from_fn(self.n_subjects + other.n_subjects, self.n_covariates(), |r, c| {
            if r < self.n_subjects {
                self.covariates[(r, c)]
            } else {
                other.covariates[(r - self.n_subjects, c)]
            }
        });
        Ok(Self {
            n_subjects: self.n_subjects + other.n_subjects,
            n_nodes: self.n_nodes,
            n_times: self.n_times,
            family: self.family,
            adjacency,
            covariates,
            time_grid: self.time_grid.clone(),
        })
    }

    /// Number of unordered node pairs `n(n-1)/2`.
    pub fn n_pairs(&self) -> usize {
        self.n_nodes * (self.n_nodes - 1) / 2
    }
}

/// Centers and scales each column in place (sample standard deviation).
pub fn standardize_columns(x: &mut DMatrix<f64>) -> Result<()> {
    let rows = x.nrows();
    if rows < 2 {
        return Err(Error::InvalidData(
            "standardization needs at least two subjects".into(),
        ));
    }
    for (c, mut col) in x.column_iter_mut().enumerate() {
        let mean = col.sum() / rows as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (rows - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::InvalidData(format!("covariate column {c} is constant")));
        }
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(adj: Vec<u8>) -> Result<DynamicNetworkDataset> {
        DynamicNetworkDataset::new(
            Family::BernoulliLogit,
            2,
            vec![0.0],
            Adjacency::U8(adj),
            DMatrix::from_row_slice(1, 1, &[0.5]),
        )
    }

    #[test]
    fn validates_networks() {
        assert!(tiny(vec![0, 1, 1, 0]).is_ok());
        assert!(tiny(vec![0, 1, 0, 0]).is_err(), "asymmetric");
        assert!(tiny(vec![1, 1, 1, 0]).is_err(), "diagonal");
        assert!(tiny(vec![0, 2, 2, 0]).is_err(), "non-binary");
        assert!(tiny(vec![0, 1, 1]).is_err(), "short");
    }

    #[test]
    fn standardization_moments() {
        let mut x = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 2.0, 0.0, 3.0, 5.0, 7.0, 1.0]);
        standardize_columns(&mut x).unwrap();
        for c in x.column_iter() {
            let mean = c.sum() / 4.0;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((sd - 1.0).abs() < 1e-12);
        }
        let mut constant = DMatrix::from_element(3, 1, 2.0);
        assert!(standardize_columns(&mut constant).is_err());
    }

    #[test]
    fn subset_reorders_subjects() {
        let d = DynamicNetworkDataset::new(
            Family::BernoulliLogit,
            2,
            vec![0.0],
            Adjacency::U8(vec![0, 1, 1, 0, 0, 0, 0, 0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
        )
        .unwrap();
        let s = d.subset(&[1, 0]).unwrap();
        assert_eq!(s.edge(1, 0, 0, 1), 1.0);
        assert_eq!(s.edge(0, 0, 0, 1), 0.0);
        assert_eq!(s.covariates()[(0, 0)], 2.0);
    }
}
