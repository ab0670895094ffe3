//! Fixtures shared by the benchmarks.

use halluc_core::hallucinator::{init_hallucinator, HallucinationInputs, Hallucinator, NoiseSpec, Variant};
use halluc_core::heads::{ClassifierHead, HeadKind, PrototypeRegistry};
use halluc_core::{Matrix, Rng};

/// A `rows × cols` standard normal matrix.
pub fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).expect("finite draws")
}

/// A head, a batch of features and targets at the default scale.
pub fn head_fixture(kind: HeadKind, batch: usize) -> (ClassifierHead, Matrix, Vec<usize>) {
    let mut rng = Rng::new(0, "bench-head");
    let d = 32;
    let head = ClassifierHead::new(kind, 20, d, 20.0, 0.1, &mut rng);
    let x = normal_matrix(batch, d, &mut rng);
    let targets = (0..batch).map(|_| rng.index(21)).collect();
    (head, x, targets)
}

/// A conservative hallucinator with `n` requests spread over five classes.
pub fn halluc_fixture(n: usize) -> (Hallucinator, ClassifierHead, HallucinationInputs) {
    let mut rng = Rng::new(0, "bench-halluc");
    let d = 32;
    let h = init_hallucinator(d, Variant::Conservative, 0.02, &mut rng).expect("valid dims");
    let head = ClassifierHead::new(HeadKind::Cosine, 20, d, 20.0, 0.1, &mut rng);
    let mut reg = PrototypeRegistry::new(20, 0, d);
    for c in 0..20 {
        reg.update(c, &rng.normal_vec(d, 1.0)).expect("slot exists");
    }
    let seeds: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(d, 1.0)).collect();
    let requests: Vec<(usize, &[f64])> = seeds.iter().enumerate().map(|(i, s)| (15 + i % 5, s.as_slice())).collect();
    let noise = NoiseSpec {
        mean: vec![0.0; d],
        std: vec![1.0; d],
    };
    let inputs = HallucinationInputs::build(&reg, &requests, &noise, &mut rng).expect("prototypes present");
    (h, head, inputs)
}
