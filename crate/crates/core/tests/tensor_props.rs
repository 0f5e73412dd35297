use ann_core::tensor::kernels::matmul_seq;
use ann_core::tensor::{Distribution, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Tensor::from_vec(&[rows, cols], v).unwrap())
}

fn dims() -> impl Strategy<Value = usize> {
    1usize..7
}

fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, p) = b.dims2().unwrap();
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a.at(&[i, t]) * b.at(&[t, j]);
            }
            out[i * p + j] = acc;
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((a, b) in (dims(), dims(), dims()).prop_flat_map(|(m, k, p)| (matrix(m, k), matrix(k, p)))) {
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative((a, b, c) in (dims(), dims(), dims(), dims()).prop_flat_map(|(m, k, p, q)| (matrix(m, k), matrix(k, p), matrix(p, q)))) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-9);
    }

    #[test]
    fn transpose_is_an_involution(a in (dims(), dims()).prop_flat_map(|(m, k)| matrix(m, k))) {
        let back = a.transpose2d().unwrap().transpose2d().unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn softmax_rows_are_distributions(a in (dims(), dims()).prop_flat_map(|(m, k)| matrix(m, k)), scale in 1.0f64..150.0) {
        let s = a.scale(scale).softmax_rows().unwrap();
        let (_, k) = s.dims2().unwrap();
        for row in s.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(
        (a, shifts) in (dims(), dims()).prop_flat_map(|(m, k)| (matrix(m, k), prop::collection::vec(-50.0f64..50.0, m)))
    ) {
        let (_, k) = a.dims2().unwrap();
        let shifted: Vec<f64> = a.data().iter().enumerate().map(|(i, v)| v + shifts[i / k]).collect();
        let shifted = Tensor::from_vec(a.shape(), shifted).unwrap();
        let d = a.softmax_rows().unwrap().max_abs_diff(&shifted.softmax_rows().unwrap()).unwrap();
        prop_assert!(d <= 1e-12);
    }

    #[test]
    fn rescale_divides_by_key_count(a in (dims(), dims()).prop_flat_map(|(m, k)| matrix(m, k))) {
        let (_, k) = a.dims2().unwrap();
        let r = a.rescale_rows().unwrap();
        for (x, y) in r.data().iter().zip(a.data()) {
            prop_assert!((x - y / k as f64).abs() <= 1e-15);
        }
    }

    #[test]
    fn identity_projection_is_exact(x in (dims(), dims()).prop_flat_map(|(c, n)| matrix(c, n))) {
        let (c, _) = x.dims2().unwrap();
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let eye = Tensor::from_vec(&[c, c], eye).unwrap();
        let zero = Tensor::zeros(&[c]).unwrap();
        prop_assert_eq!(Tensor::linear_project(&x, &eye, Some(&zero)).unwrap(), x.clone());
        prop_assert_eq!(Tensor::linear_project(&x, &eye, None).unwrap(), x);
    }

    #[test]
    fn projection_matches_matmul((w, x) in (dims(), dims(), dims()).prop_flat_map(|(o, i, n)| (matrix(o, i), matrix(i, n)))) {
        prop_assert_eq!(Tensor::linear_project(&x, &w, None).unwrap(), w.matmul(&x).unwrap());
    }

    #[test]
    fn concat_stacks_rows((a, b) in (dims(), dims(), dims()).prop_flat_map(|(ca, cb, n)| (matrix(ca, n), matrix(cb, n)))) {
        let c = Tensor::concat_channels(&a, &b).unwrap();
        prop_assert_eq!(c.shape()[0], a.shape()[0] + b.shape()[0]);
        prop_assert_eq!(&c.data()[..a.len()], a.data());
        prop_assert_eq!(&c.data()[a.len()..], b.data());
    }

    #[test]
    fn add_commutes_and_cancels((a, b) in (dims(), dims()).prop_flat_map(|(m, k)| (matrix(m, k), matrix(m, k)))) {
        prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        prop_assert!(a.add(&a.scale(-1.0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_fill_is_reproducible(seed in any::<u64>(), n in 1usize..64) {
        for dist in [Distribution::Uniform, Distribution::Gaussian] {
            let a = Tensor::seeded_fill(&[n], seed, dist).unwrap();
            let b = Tensor::seeded_fill(&[n], seed, dist).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        let u = Tensor::seeded_fill(&[n], seed, Distribution::Uniform).unwrap();
        prop_assert!(u.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn blocked_kernel_is_bitwise_naive((a, b) in (1usize..20, 1usize..300, 1usize..20).prop_flat_map(|(m, k, p)| (matrix(m, k), matrix(k, p)))) {
        let (m, k) = a.dims2().unwrap();
        let (_, p) = b.dims2().unwrap();
        let mut out = vec![0.0; m * p];
        matmul_seq(a.data(), b.data(), &mut out, k, p);
        let expected = naive(&a, &b);
        prop_assert!(out.iter().zip(&expected).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn different_seeds_differ() {
    for seed in 0..50u64 {
        let a = Tensor::seeded_fill(&[16], seed, Distribution::Uniform).unwrap();
        let b = Tensor::seeded_fill(&[16], seed + 1, Distribution::Uniform).unwrap();
        assert_ne!(a, b);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_kernel_is_bitwise_sequential() {
    use ann_core::tensor::kernels::matmul_par;
    let a = Tensor::seeded_fill(&[97, 61], 1, Distribution::Uniform).unwrap();
    let b = Tensor::seeded_fill(&[61, 83], 2, Distribution::Uniform).unwrap();
    let mut seq = vec![0.0; 97 * 83];
    let mut par = vec![0.0; 97 * 83];
    matmul_seq(a.data(), b.data(), &mut seq, 61, 83);
    matmul_par(a.data(), b.data(), &mut par, 61, 83);
    assert_eq!(seq, par);
}
