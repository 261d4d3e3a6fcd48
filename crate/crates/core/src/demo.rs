//! Bundled demo plant: one Schur-stable mode plus an undamped rotation,
//! driven through a single input and observed in full through heavy noise.
//! Used by the CLI walkthrough, the benchmarks, and the test suite.

use nalgebra::{DMatrix, DVector};

use crate::sysmodel::{
    validate_model, CostWeights, HorizonConfig, JordanSplit, LoadedModel, ModelFile, SystemModel,
};

/// Raw demo plant (3 states, 1 input, 3 outputs).
pub fn demo_system() -> SystemModel {
    SystemModel {
        a: DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0]),
        b: DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 1.0]),
        c: DMatrix::identity(3, 3),
        sigma_w: DMatrix::identity(3, 3) * 10.0,
        sigma_v: DMatrix::identity(3, 3) * 10.0,
        sigma_x0: DMatrix::identity(3, 3),
        xhat0: DVector::zeros(3),
    }
}

/// Validated demo bundle: split `(1, 2)`, horizon `N = 5`, `Nc = 2`,
/// `u_max = 168.6783`, `phi_max = 1`, unit stage weights.
pub fn demo_loaded() -> LoadedModel {
    let model = validate_model(demo_system()).expect("demo model is valid");
    let split = JordanSplit::from_model(&model, 1, 2).expect("demo split is valid");
    let horizon = HorizonConfig {
        n_horizon: 5,
        n_control: 2,
        u_max: 168.6783,
        phi_max: 1.0,
    };
    horizon.validate(split.kappa).expect("demo horizon is valid");
    let weights = CostWeights::uniform(DMatrix::identity(3, 3), DMatrix::identity(1, 1), 5);
    LoadedModel {
        model,
        split,
        horizon,
        weights,
    }
}

/// The demo plant in the on-disk schema.
pub fn demo_model_file() -> ModelFile {
    let to_nested = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    };
    let sys = demo_system();
    let eye3 = to_nested(&DMatrix::identity(3, 3));
    ModelFile {
        a: to_nested(&sys.a),
        b: to_nested(&sys.b),
        c: to_nested(&sys.c),
        sigma_w: to_nested(&sys.sigma_w),
        sigma_v: to_nested(&sys.sigma_v),
        sigma_x0: to_nested(&sys.sigma_x0),
        xhat0: vec![0.0; 3],
        split: crate::sysmodel::SplitSection { n1: 1, n2: 2 },
        horizon: crate::sysmodel::HorizonSection {
            n: 5,
            nc: 2,
            u_max: 168.6783,
            phi_max: 1.0,
        },
        weights: crate::sysmodel::WeightsSection {
            wx: vec![eye3.clone(); 5],
            wx_n: eye3,
            wu: vec![vec![vec![1.0]]; 5],
        },
    }
}
