use ndarray::{Array2, Axis};

use crate::rng::SeededRng;

/// n observations × d features. All data blocks (X, S, Y, Z, Ŷ) use it.
pub type SampleMatrix = Array2<f64>;

/// Triplets `(x_i, s_i, y_i)` stored as three row-aligned blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: SampleMatrix,
    pub s: SampleMatrix,
    pub y: SampleMatrix,
}

impl Dataset {
    pub fn new(x: SampleMatrix, s: SampleMatrix, y: SampleMatrix) -> Self {
        assert_eq!(x.nrows(), s.nrows(), "x and s row counts differ");
        assert_eq!(x.nrows(), y.nrows(), "x and y row counts differ");
        Self { x, s, y }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            s: self.s.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }

    /// Seeded shuffle, then the first `1 − test_fraction` of rows train and
    /// the rest test.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = SeededRng::new(seed);
        let perm = rng.permutation(self.len());
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let n_train = self.len() - n_test;
        (self.select(&perm[..n_train]), self.select(&perm[n_train..]))
    }

    /// Header `x_0,...,s_0,...,y` followed by one line per row.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = (0..self.x.ncols()).map(|j| format!("x_{j}")).collect();
        header.extend((0..self.s.ncols()).map(|j| format!("s_{j}")));
        header.push("y".into());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let cells: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.s.row(i).iter())
                .chain(std::iter::once(&self.y[[i, 0]]))
                .map(|v| format!("{v:?}"))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn split_sizes_and_disjointness() {
        let n = 50;
        let d = Dataset::new(
            Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
            Array2::zeros((n, 1)),
            Array2::zeros((n, 1)),
        );
        let (train, test) = d.split(0.2, 3);
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 10);
        let mut all: Vec<f64> = train.x.iter().chain(test.x.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(d.split(0.2, 3), (train, test));
    }

    #[test]
    fn csv_layout() {
        let d = Dataset::new(array![[1.0, 2.5]], array![[-1.0]], array![[0.0]]);
        assert_eq!(d.to_csv(), "x_0,x_1,s_0,y\n1.0,2.5,-1.0,0.0\n");
    }
}
