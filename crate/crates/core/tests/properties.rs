use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use colormamba::checkpoint::Checkpoint;
use colormamba::color::{hsv_to_rgb_pixel, rgb_to_hsv_pixel, to_hsv_from_nir};
use colormamba::metrics::{ae, ergas, psnr, sam, ssim};
use colormamba::objectives::{ms_ssim, MsSsimConfig};
use colormamba::scan2d::{invert, pad_with_tokens, unfold_four_directions, Direction};
use colormamba::ssm::{
    blelloch_scan, discretize, scan_parallel, scan_sequential, sequential_recurrence, ScanElement, SsmParams,
};
use colormamba::{Graph, Tensor};

fn random_ssm(l: usize, n: usize, seed: u64) -> (SsmParams<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = SsmParams {
        a: Tensor::<f64>::rand_uniform(&[n], -3.0, -0.01, &mut rng).data().to_vec(),
        b: Tensor::randn(&[l, n], 1.0, &mut rng),
        c: Tensor::randn(&[l, n], 1.0, &mut rng),
        d: 0.3,
        delta: Tensor::<f64>::rand_uniform(&[l], 0.001, 1.0, &mut rng).data().to_vec(),
    };
    let x = Tensor::<f64>::randn(&[l], 1.0, &mut rng).data().to_vec();
    (p, x)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(&[h, w, c], 0.05, 0.95, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_scan_matches_sequential(l in 1usize..400, n in 1usize..10, seed: u64) {
        let (p, x) = random_ssm(l, n, seed);
        let disc = discretize(&p).unwrap();
        let s = scan_sequential(&disc, &p.c, p.d, &x).unwrap();
        let q = scan_parallel(&disc, &p.c, p.d, &x).unwrap();
        for (a, b) in s.iter().zip(&q) {
            prop_assert!(close(*a, *b, 1e-9), "{a} vs {b}");
        }
    }

    #[test]
    fn scan_is_linear_in_its_input(l in 1usize..200, n in 1usize..6, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed: u64) {
        let (p, x) = random_ssm(l, n, seed);
        let z = Tensor::<f64>::randn(&[l], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).into_data();
        let disc = discretize(&p).unwrap();
        let mix: Vec<f64> = x.iter().zip(&z).map(|(a, b)| alpha * a + beta * b).collect();
        let ym = scan_sequential(&disc, &p.c, p.d, &mix).unwrap();
        let yx = scan_sequential(&disc, &p.c, p.d, &x).unwrap();
        let yz = scan_sequential(&disc, &p.c, p.d, &z).unwrap();
        for k in 0..l {
            let expect = alpha * yx[k] + beta * yz[k];
            prop_assert!((ym[k] - expect).abs() <= 1e-10 * (1.0 + expect.abs()), "step {k}: {} vs {expect}", ym[k]);
        }
    }

    #[test]
    fn blelloch_matches_recurrence(pairs in prop::collection::vec((-1.2f64..1.2, -2.0f64..2.0), 0..300)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let fast = blelloch_scan(&a, &b);
        let slow = sequential_recurrence(&a, &b);
        prop_assert_eq!(fast.len(), slow.len());
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!(close(*x, *y, 1e-10), "{x} vs {y}");
        }
    }

    #[test]
    fn scan_elements_compose_associatively(e in prop::array::uniform3((-2.0f64..2.0, -2.0f64..2.0))) {
        let [p, q, r] = e.map(|(a, b)| ScanElement { a, b });
        let left = p.then(q).then(r);
        let right = p.then(q.then(r));
        prop_assert!(close(left.a, right.a, 1e-12) && close(left.b, right.b, 1e-12));
        prop_assert_eq!(p.then(ScanElement::identity()), p);
        prop_assert_eq!(ScanElement::identity().then(p), p);
    }

    #[test]
    fn hsv_roundtrip_and_ranges(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let [h, s, v] = rgb_to_hsv_pixel(r, g, b);
        prop_assert!((0.0..1.0).contains(&h) && (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&v));
        prop_assert_eq!(v, r.max(g).max(b));
        let back = hsv_to_rgb_pixel(h, s, v);
        for (x, y) in back.iter().zip([r, g, b]) {
            prop_assert!((x - y).abs() < 1e-6, "{back:?} vs {:?}", [r, g, b]);
        }
    }

    #[test]
    fn nir_lands_in_value_channel(h in 1usize..9, w in 1usize..9, seed: u64) {
        let nir = image(h, w, 1, seed);
        let hsv = to_hsv_from_nir(&nir).unwrap();
        prop_assert_eq!(hsv.shape(), &[h, w, 3][..]);
        for (px, v) in hsv.data().chunks(3).zip(nir.data()) {
            prop_assert_eq!(px[2].to_bits(), v.to_bits());
        }
    }

    #[test]
    fn direction_orders_are_permutations(rows in 1usize..20, cols in 1usize..20) {
        let all: Vec<usize> = (0..rows * cols).collect();
        for d in Direction::ALL {
            let o = d.order(rows, cols);
            let inv = invert(&o);
            for (i, &p) in o.iter().enumerate() {
                prop_assert_eq!(inv[p], i);
            }
            let mut sorted = o.clone();
            sorted.sort_unstable();
            prop_assert_eq!(&sorted, &all);
        }
        let fwd = Direction::RowMajor.order(rows, cols);
        let mut rev = Direction::RowMajorReversed.order(rows, cols);
        rev.reverse();
        prop_assert_eq!(fwd, rev);
        let fwd = Direction::ColMajor.order(rows, cols);
        let mut rev = Direction::ColMajorReversed.order(rows, cols);
        rev.reverse();
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn padding_border_and_interior(b in 1usize..3, h in 1usize..7, w in 1usize..7, c in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[b, h, w, c], 1.0, &mut rng);
        let token = Tensor::<f64>::randn(&[c], 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let pg = pad_with_tokens(&g, g.constant(x.clone()), Some(g.constant(token.clone()))).unwrap();
        let grid = g.value(pg.grid).clone();
        prop_assert_eq!(grid.shape(), &[b, h + 2, w + 2, c][..]);
        for bi in 0..b {
            for i in 0..h + 2 {
                for j in 0..w + 2 {
                    for k in 0..c {
                        let v = grid.at4(bi, i, j, k);
                        let border = i == 0 || j == 0 || i == h + 1 || j == w + 1;
                        let want = if border { token.data()[k] } else { x.at4(bi, i - 1, j - 1, k) };
                        prop_assert_eq!(v.to_bits(), want.to_bits());
                    }
                }
            }
        }
        prop_assert_eq!(&*g.value(g.crop_border(pg.grid).unwrap()), &x);
        let bundle = unfold_four_directions(&g, &pg).unwrap();
        prop_assert_eq!(bundle.len(), (h + 2) * (w + 2));
        for d in 0..4 {
            prop_assert_eq!(g.shape(bundle.sequences[d]), vec![b, bundle.len(), c]);
        }
    }

    #[test]
    fn metrics_are_symmetric_where_defined(h in 11usize..18, w in 11usize..18, seed: u64) {
        let x = image(h, w, 3, seed);
        let y = image(h, w, 3, seed.wrapping_add(1));
        prop_assert!(close(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap(), 1e-12));
        prop_assert!(close(ae(&x, &y).unwrap(), ae(&y, &x).unwrap(), 1e-12));
        prop_assert!(close(sam(&x, &y).unwrap(), sam(&y, &x).unwrap(), 1e-12));
        prop_assert!(ssim(&x, &y).unwrap() <= 1.0 + 1e-12);
        prop_assert!(ergas(&x, &y, 1.0).unwrap() >= 0.0);
        prop_assert!(ae(&x, &y).unwrap() >= 0.0 && sam(&x, &y).unwrap() >= 0.0);
    }

    #[test]
    fn psnr_falls_as_error_grows(seed: u64, small in 0.001f64..0.05, extra in 0.001f64..0.05) {
        let x = image(6, 6, 3, seed);
        let near = x.map(|v| v + small);
        let far = x.map(|v| v + small + extra);
        prop_assert!(psnr(&far, &x, 1.0).unwrap() < psnr(&near, &x, 1.0).unwrap());
        prop_assert!(psnr(&near, &x, 1.0).unwrap() <= 100.0);
    }

    #[test]
    fn ms_ssim_stays_in_unit_interval(side in 11usize..24, seed: u64) {
        let g = Graph::<f64>::new();
        let x = g.constant(image(side, side, 3, seed).reshape(&[1, side, side, 3]).unwrap());
        let y = g.constant(image(side, side, 3, seed ^ 7).reshape(&[1, side, side, 3]).unwrap());
        let cfg = MsSsimConfig::fit(side, side).unwrap();
        let v = g.value(ms_ssim(&g, x, y, &cfg).unwrap()).item().unwrap();
        prop_assert!((0.0..=1.0).contains(&v), "ms-ssim {v}");
        let same = g.value(ms_ssim(&g, x, x, &cfg).unwrap()).item().unwrap();
        prop_assert!((same - 1.0).abs() < 1e-9, "ms-ssim(x, x) = {same}");
    }

    #[test]
    fn checkpoint_bytes_roundtrip(
        entries in prop::collection::btree_map("[a-z.]{1,12}", "[ -~]{0,16}", 0..8),
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5),
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::new();
        for (k, v) in &entries {
            ck.set(k.clone(), v);
        }
        for (i, s) in shapes.iter().enumerate() {
            ck.push(format!("t{i}"), Tensor::randn(s, 1.0, &mut rng));
        }
        let bytes = ck.to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn reshape_keeps_values(dims in prop::collection::vec(1usize..5, 1..5), seed: u64) {
        let t = Tensor::<f64>::randn(&dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let n: usize = dims.iter().product();
        prop_assert_eq!(t.numel(), n);
        let flat = t.clone().reshape(&[n]).unwrap();
        prop_assert_eq!(flat.data(), t.data());
        prop_assert!(t.clone().reshape(&[n + 1]).is_err());
    }
}
