use proptest::prelude::*;
use skyalign_tensor::io::{load_checkpoint, read_tensor, save_checkpoint, write_tensor};
use skyalign_tensor::{ParamStore, Tensor};

proptest! {
    #[test]
    fn f32_representable_values_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) as f64 / 1e6) as f32 as f64).collect();
        let t = Tensor::new(dims, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&buf[..]).unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn checkpoint_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    store.add("enc.conv1.w", Tensor::new(vec![2, 1, 1, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
    store.add("lambda1", Tensor::scalar(-5.0)).unwrap();
    save_checkpoint(dir.path(), &store).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest, "enc.conv1.w 2x1x1x2\nlambda1 1\n");
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back.get(back.id("lambda1").unwrap()).item(), -5.0);
}
