//! Property tests for the format and algebra invariants.

use olivine::augment::{flip, FlipAxis};
use olivine::dataset::{read_manifest, stratified_split, write_manifest, ManifestRecord, Split, SplitSpec};
use olivine::image::{read_pnm, write_pnm, Image};
use olivine::preprocess::{combine_masks, normalize_to_tensor, resize_bilinear, Mask};
use olivine::tensor::{conv2d_forward, he_init, matmul, Tensor};
use olivine::Rng;
use proptest::prelude::*;

fn arb_image() -> impl Strategy<Value = Image> {
    (1usize..=12, 1usize..=12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, ch)| {
        proptest::collection::vec(any::<u8>(), w * h * ch)
            .prop_map(move |pixels| Image::new(w, h, ch, pixels).unwrap())
    })
}

fn arb_mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), w * h).prop_map(move |bits| Mask::new(w, h, bits).unwrap())
}

proptest! {
    #[test]
    fn pnm_round_trips(img in arb_image()) {
        let bytes = write_pnm(&img);
        let back = read_pnm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        // Writers are deterministic: write ∘ read ∘ write is stable.
        prop_assert_eq!(write_pnm(&back), bytes);
    }

    #[test]
    fn conv_identity_kernel_is_identity(
        c in 1usize..=3,
        h in 1usize..=6,
        w in 1usize..=6,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f32>::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-10.0, 10.0) as f32).collect(),
        ).unwrap();
        let mut eye = Tensor::zeros(vec![c, c, 1, 1]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        let y = conv2d_forward(&x, &eye, 1, 0).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_identity_and_distributivity(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut rand3 = || Tensor::<f32>::new(
            vec![3, 3],
            (0..9).map(|_| rng.uniform(-2.0, 2.0) as f32).collect(),
        ).unwrap();
        let a = rand3();
        let b = rand3();
        let c = rand3();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let right = matmul(&a, &eye).unwrap();
        let left = matmul(&eye, &a).unwrap();
        prop_assert_eq!(right.data(), a.data());
        prop_assert_eq!(left.data(), a.data());

        let bc = Tensor::new(
            vec![3, 3],
            b.data().iter().zip(c.data()).map(|(x, y)| x + y).collect(),
        ).unwrap();
        let lhs = matmul(&a, &bc).unwrap();
        let ab = matmul(&a, &b).unwrap();
        let ac = matmul(&a, &c).unwrap();
        for i in 0..9 {
            prop_assert!((lhs.data()[i] - (ab.data()[i] + ac.data()[i])).abs() <= 1e-5);
        }
    }

    #[test]
    fn resize_constants_and_identity(img in arb_image(), ow in 1usize..=9, oh in 1usize..=9) {
        let same = resize_bilinear(&img, img.width(), img.height()).unwrap();
        prop_assert_eq!(&same, &img);
        let flat = Image::filled(img.width(), img.height(), img.channels(), 77);
        let scaled = resize_bilinear(&flat, ow, oh).unwrap();
        prop_assert!(scaled.pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn flips_are_involutions(img in arb_image()) {
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            prop_assert_eq!(&flip(&flip(&img, axis), axis), &img);
        }
    }

    #[test]
    fn normalize_bounds_and_inverse(img in arb_image()) {
        let t = normalize_to_tensor(&img);
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // The affine map inverts back to the exact 8-bit values.
        let c = img.channels();
        let (w, h) = (img.width(), img.height());
        for (i, &v) in t.data().iter().enumerate() {
            let (ch, rest) = (i / (w * h), i % (w * h));
            let (y, x) = (rest / w, rest % w);
            let back = ((v * 0.5 + 0.5) * 255.0).round() as u8;
            prop_assert_eq!(back, img.get(x, y, ch), "at ({}, {}, {})", x, y, ch);
        }
        prop_assert_eq!(t.shape(), &[c, h, w]);
    }

    #[test]
    fn mask_intersection_algebra((a, b, c) in (arb_mask(7, 5), arb_mask(7, 5), arb_mask(7, 5))) {
        let ab = combine_masks(&a, &b).unwrap();
        let ba = combine_masks(&b, &a).unwrap();
        prop_assert_eq!(&ab, &ba);
        let abc1 = combine_masks(&ab, &c).unwrap();
        let abc2 = combine_masks(&a, &combine_masks(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(&abc1, &abc2);
        prop_assert_eq!(&combine_masks(&a, &a).unwrap(), &a);
    }

    #[test]
    fn he_init_streams_are_bit_identical(seed in any::<u64>(), n in 1usize..128) {
        let a: Tensor = he_init(&[n], 9, &mut Rng::new(seed)).unwrap();
        let b: Tensor = he_init(&[n], 9, &mut Rng::new(seed)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn manifest_round_trips(
        n_classes in 2usize..5,
        per_class in 1usize..6,
        tag in proptest::collection::vec(0usize..4, 25),
    ) {
        let mut records = Vec::new();
        let mut t = 0;
        for ci in 0..n_classes {
            let name = format!("class_{ci:02}");
            for i in 0..per_class {
                let split = match tag[t % tag.len()] {
                    0 => None,
                    1 => Some(Split::Train),
                    2 => Some(Split::Val),
                    _ => Some(Split::Test),
                };
                t += 1;
                records.push(ManifestRecord {
                    path: format!("{name}/img_{i}.ppm"),
                    class_name: name.clone(),
                    class_index: ci,
                    split,
                });
            }
        }
        let bytes = write_manifest(&records).unwrap();
        prop_assert_eq!(read_manifest(&bytes).unwrap(), records);
    }

    #[test]
    fn stratified_counts_follow_floor_and_repair(per_class in 3usize..200, seed in any::<u64>()) {
        let mut records = Vec::new();
        for ci in 0..2 {
            for i in 0..per_class {
                records.push(ManifestRecord {
                    path: format!("c{ci}/{i}.ppm"),
                    class_name: format!("c{ci}"),
                    class_index: ci,
                    split: None,
                });
            }
        }
        let out = stratified_split(&records, &SplitSpec::default(), seed).unwrap();
        let n = per_class as f64;
        let mut train = (n * 0.8).floor() as usize;
        let mut val = (n * 0.1).floor() as usize;
        let mut test = per_class - train - val;
        if val == 0 {
            train -= 1;
            val += 1;
        }
        if test == 0 {
            train -= 1;
            test += 1;
        }
        for ci in 0..2 {
            let count = |s| out.iter().filter(|r| r.class_index == ci && r.split == Some(s)).count();
            prop_assert_eq!(count(Split::Train), train);
            prop_assert_eq!(count(Split::Val), val);
            prop_assert_eq!(count(Split::Test), test);
        }
    }
}
