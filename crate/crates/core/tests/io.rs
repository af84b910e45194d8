use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use turbsim::atmosphere::{Cn2Profile, OpticalConfig};
use turbsim::io::*;
use turbsim::psfbasis::*;

proptest! {
    #[test]
    fn container_round_trip_preserves_bits(
        dims in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
        key in "[a-z_]{1,8}",
        value in "[ -~]{0,20}",
    ) {
        let n: usize = dims.iter().product();
        let vals: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(i as u32 % 64))).collect();
        let c = ArrayContainer::new(ArrayD::from_shape_vec(IxDyn(&dims), vals.clone()).unwrap()).with(&key, &value);
        let back = ArrayContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.data.shape(), &dims[..]);
        prop_assert!(back.data.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.get(&key), Some(value.as_str()));
    }
}

fn small_cfg() -> OpticalConfig {
    let mut c = OpticalConfig::new(525e-9, 0.2034, 7000.0, Cn2Profile::Constant(1e-15));
    c.n = 64;
    c.dx = c.aperture / 32.0;
    c
}

#[test]
fn basis_and_regressor_survive_a_file_round_trip() {
    let ds = generate_psf_dataset(&small_cfg(), 15, 120, (0.0, 2.0), Some(11), 4).unwrap();
    let basis = fit_pca(&ds, 8).unwrap();
    let model = p2s_train(&ds, &basis, &P2SHyper { epochs: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let bp = dir.path().join("basis.tsim");
    basis_to_container(&basis).write(&bp).unwrap();
    let b2 = basis_from_container(&ArrayContainer::read(&bp).unwrap()).unwrap();
    assert_eq!(b2.mean, basis.mean);
    assert_eq!(b2.kernels, basis.kernels);
    assert_eq!(b2.sigma, basis.sigma);
    assert_eq!(b2.provenance.samples, 120);

    let mp = dir.path().join("p2s.tsim");
    p2s_to_container(&model).write(&mp).unwrap();
    let m2 = p2s_from_container(&ArrayContainer::read(&mp).unwrap()).unwrap();
    let x = vec![0.3; model.inputs()];
    assert_eq!(p2s_infer(&m2, &x), p2s_infer(&model, &x));
    assert!(basis_from_container(&ArrayContainer::read(&mp).unwrap()).is_err());
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    assert_eq!(config_hash("a=1\n"), config_hash("a=1\n"));
    assert_ne!(config_hash("a=1\n"), config_hash("a=2\n"));
    assert_eq!(config_hash("").len(), 64);
}
