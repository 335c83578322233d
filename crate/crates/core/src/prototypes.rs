//! Prototype tensors, class assignment and the sigmoid slot gates.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

/// Initial slot parameter; with `tau = 100` every gate starts at `σ(5)`.
pub const INITIAL_SLOT_PARAM: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 100.0;

/// Training image and token a sub-prototype was projected onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: usize,
    pub token: usize,
}

/// `m = ρ·C` prototypes of `K` sub-prototypes each. Sub-prototype `k` of
/// prototype `j` is row `j·K + k` of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub vectors: Array2<f64>,
    pub class_of: Vec<usize>,
    pub slot_params: Array2<f64>,
    pub tau: f64,
    pub slots_frozen: bool,
    pub provenance: Vec<Option<Provenance>>,
}

/// Slot gate values, `m×K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotIndicators {
    pub values: Array2<f64>,
    pub rounded: bool,
}

impl SlotIndicators {
    pub fn row(&self, j: usize) -> Vec<f64> {
        self.values.row(j).to_vec()
    }
}

impl PrototypeBank {
    /// Unit-norm uniform sub-prototypes, class-contiguous layout, all gates
    /// open.
    pub fn init(num_classes: usize, per_class: usize, k: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || per_class == 0 || k == 0 || dim == 0 {
            return Err(Error::Config("prototype bank sizes must be positive".into()));
        }
        let m = num_classes * per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors: Array2<f64> = Array2::from_shape_fn((m * k, dim), |_| rng.random_range(0.0..1.0));
        for mut row in vectors.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        Ok(Self {
            vectors,
            class_of: (0..m).map(|j| j / per_class).collect(),
            slot_params: Array2::from_elem((m, k), INITIAL_SLOT_PARAM),
            tau: DEFAULT_TAU,
            slots_frozen: false,
            provenance: vec![None; m * k],
        })
    }

    /// Number of prototypes `m`.
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    /// Sub-prototypes per prototype `K`.
    pub fn slots(&self) -> usize {
        self.slot_params.ncols()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_of.iter().max().map_or(0, |c| c + 1)
    }

    pub fn per_class(&self) -> usize {
        let c = self.num_classes();
        if c == 0 {
            0
        } else {
            self.len() / c
        }
    }

    pub fn prototype(&self, j: usize) -> ArrayView2<'_, f64> {
        let k = self.slots();
        self.vectors.slice(s![j * k..(j + 1) * k, ..])
    }

    pub fn prototypes_of_class(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.class_of.iter().enumerate().filter(move |(_, &c)| c == class).map(|(j, _)| j)
    }

    /// Shape and layout invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        let k = self.slots();
        if self.slot_params.nrows() != m || self.vectors.nrows() != m * k || self.provenance.len() != m * k {
            return Err(Error::Contract("prototype bank tensors disagree on m or K".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Contract("slot temperature must be positive".into()));
        }
        let c = self.num_classes();
        let rho = self.per_class();
        if rho == 0 || rho * c != m || (0..c).any(|l| self.prototypes_of_class(l).count() != rho) {
            return Err(Error::Contract("every class must own the same number of prototypes".into()));
        }
        Ok(())
    }

    /// `σ(v·τ)` for every slot.
    pub fn soft_indicators(&self) -> SlotIndicators {
        let tau = self.tau;
        SlotIndicators { values: self.slot_params.mapv(|v| sigmoid(v * tau)), rounded: false }
    }

    /// The gates the model actually uses: soft while training, rounded (with
    /// the keep-one guard) once frozen.
    pub fn indicators(&self) -> SlotIndicators {
        let soft = self.soft_indicators();
        if self.slots_frozen {
            SlotIndicators { values: round_with_guard(&soft.values), rounded: true }
        } else {
            soft
        }
    }

    /// Per prototype, which slots are switched on in the frozen state.
    pub fn active_slots(&self, j: usize) -> Vec<bool> {
        let ind = self.indicators();
        ind.values.row(j).iter().map(|&v| v >= 0.5).collect()
    }

    /// Round every gate to 0/1 and freeze. A prototype left with no open slot
    /// keeps its largest gate (lowest `k` on ties).
    pub fn round_and_freeze_slots(&self) -> Result<PrototypeBank> {
        if self.slots_frozen {
            return Err(Error::Contract("slots are already frozen".into()));
        }
        let mut out = self.clone();
        out.slots_frozen = true;
        Ok(out)
    }
}

fn round_with_guard(soft: &Array2<f64>) -> Array2<f64> {
    let mut out = soft.mapv(f64::round);
    for (mut row, srow) in out.rows_mut().into_iter().zip(soft.rows()) {
        if row.iter().all(|&v| v == 0.0) {
            let mut best = 0;
            for (k, &v) in srow.iter().enumerate() {
                if v > srow[best] {
                    best = k;
                }
            }
            row[best] = 1.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank_with_soft(values: &[f64]) -> PrototypeBank {
        let mut bank = PrototypeBank::init(1, 1, values.len(), 3, 0).unwrap();
        // invert the sigmoid so the soft gates equal `values`
        for (k, &p) in values.iter().enumerate() {
            bank.slot_params[[0, k]] = (p / (1.0 - p)).ln() / bank.tau;
        }
        bank
    }

    #[test]
    fn layout_and_sizes() {
        let bank = PrototypeBank::init(200, 10, 4, 8, 1).unwrap();
        assert_eq!(bank.len(), 2000);
        let bank = PrototypeBank::init(2, 1, 4, 8, 1).unwrap();
        assert_eq!(bank.class_of, vec![0, 1]);
        assert_eq!(bank.vectors.nrows(), 8);
        for row in bank.vectors.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        bank.validate().unwrap();
    }

    #[test]
    fn init_is_reproducible() {
        let a = PrototypeBank::init(3, 2, 4, 5, 9).unwrap();
        let b = PrototypeBank::init(3, 2, 4, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, PrototypeBank::init(3, 2, 4, 5, 10).unwrap());
    }

    #[test]
    fn initial_gates_are_nearly_open() {
        let bank = PrototypeBank::init(2, 1, 4, 3, 0).unwrap();
        let ind = bank.soft_indicators();
        // 1 / (1 + e^-5)
        assert!(ind.values.iter().all(|&v| (v - 0.993_307_149_075_715_2).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_values() {
        let mut bank = PrototypeBank::init(1, 1, 3, 2, 0).unwrap();
        bank.slot_params = array![[0.0, -0.05, 1e6]];
        let v = bank.soft_indicators().values;
        assert_eq!(v[[0, 0]], 0.5);
        assert!((v[[0, 1]] - 0.006_692_850_924_284_856).abs() < 1e-15);
        assert_eq!(v[[0, 2]], 1.0);
        bank.slot_params = array![[-1e6, -1.0, 1.0]];
        let v = bank.soft_indicators().values;
        assert_eq!(v[[0, 0]], 0.0);
        assert!(v[[0, 1]] < v[[0, 2]]);
    }

    #[test]
    fn rounding() {
        let bank = bank_with_soft(&[0.99, 0.98, 0.02, 0.51]).round_and_freeze_slots().unwrap();
        assert!(bank.slots_frozen);
        assert_eq!(bank.indicators().values, array![[1.0, 1.0, 0.0, 1.0]]);
    }

    #[test]
    fn all_closed_keeps_the_largest() {
        let bank = bank_with_soft(&[0.4, 0.4, 0.4, 0.4]).round_and_freeze_slots().unwrap();
        assert_eq!(bank.indicators().values, array![[1.0, 0.0, 0.0, 0.0]]);
        let bank = bank_with_soft(&[0.1, 0.3, 0.2, 0.3]).round_and_freeze_slots().unwrap();
        assert_eq!(bank.indicators().values, array![[0.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn saturated_gates_round_to_themselves() {
        let mut bank = PrototypeBank::init(1, 1, 3, 2, 0).unwrap();
        bank.slot_params = array![[10.0, -10.0, 10.0]];
        let soft = bank.soft_indicators().values;
        let frozen = bank.round_and_freeze_slots().unwrap();
        assert_eq!(frozen.indicators().values, soft);
    }

    #[test]
    fn freezing_twice_is_rejected() {
        let bank = PrototypeBank::init(1, 1, 2, 2, 0).unwrap().round_and_freeze_slots().unwrap();
        assert!(matches!(bank.round_and_freeze_slots(), Err(Error::Contract(_))));
    }

    #[test]
    fn validate_catches_uneven_classes() {
        let mut bank = PrototypeBank::init(2, 2, 2, 2, 0).unwrap();
        bank.class_of = vec![0, 0, 0, 1];
        assert!(bank.validate().is_err());
    }
}
