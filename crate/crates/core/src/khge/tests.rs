use std::rc::Rc;

use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck::check_gradients;
use crate::corpus::Domain;
use crate::hypergraph::{augment, DropRates, VisitRef};

fn graph(num_nodes: usize, edges: Vec<Vec<usize>>) -> Hypergraph {
    let refs = (0..edges.len())
        .map(|i| VisitRef {
            patient_id: "p".into(),
            position: i,
        })
        .collect();
    Hypergraph::from_edges(Domain::Diag, num_nodes, edges, refs).unwrap()
}

fn flat_bias(n: usize, max: usize) -> KnowledgeBias {
    // Nodes on a path: distance |i - j|.
    let d = Array2::from_shape_fn((n, n), |(i, j)| i.abs_diff(j));
    KnowledgeBias::from_distances(d, max)
}

fn small_config(layers: usize) -> EncoderConfig {
    EncoderConfig {
        dim: 4,
        layers,
        heads: 2,
        max_path_distance: 3,
        ..EncoderConfig::default()
    }
}

fn toy() -> Hypergraph {
    graph(6, vec![vec![0, 1, 2], vec![2, 3], vec![3, 4, 5], vec![1]])
}

#[test]
fn uniform_attention_identity_transform_is_mean() {
    let tape = Tape::new();
    let z = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
    let u = tape.constant(Mat::zeros((1, 2)));
    let zero = tape.constant(Mat::zeros((2, 1)));
    let nodes = Rc::new(vec![0, 1]);
    let edges = Rc::new(vec![0, 0]);
    let out = lmpn_aggregate(z, u, &nodes, &edges, 1, zero, zero);
    assert_eq!(*out.value(), array![[0.5, 0.5]]);
}

#[test]
fn single_node_hyperedge_copies_message() {
    let tape = Tape::new();
    let z = tape.constant(array![[0.3, -1.2], [2.0, 0.7]]);
    let u = tape.constant(array![[5.0, 5.0]]);
    let a = tape.constant(array![[3.0], [-2.0]]);
    let out = lmpn_aggregate(z, u, &Rc::new(vec![1]), &Rc::new(vec![0]), 1, a, a);
    assert_eq!(*out.value(), array![[2.0, 0.7]]);
}

/// Dense incidence-matrix evaluation of the same update rule.
fn dense_lmpn(messages: &Mat, targets: &Mat, incidence: &Mat, a_msg: &Mat, a_tgt: &Mat) -> Mat {
    // incidence[t, s] = 1 when message row s flows into target t.
    let (nt, ns) = incidence.dim();
    let ms = messages.dot(a_msg);
    let ts = targets.dot(a_tgt);
    let mut out = Mat::zeros((nt, messages.ncols()));
    for t in 0..nt {
        let scores: Vec<(usize, f64)> = (0..ns)
            .filter(|&s| incidence[[t, s]] > 0.0)
            .map(|s| {
                let x = ms[[s, 0]] + ts[[t, 0]];
                (s, if x > 0.0 { x } else { 0.2 * x })
            })
            .collect();
        let total: f64 = scores.iter().map(|(_, x)| x.exp()).sum();
        for (s, x) in scores {
            let w = x.exp() / total;
            for c in 0..messages.ncols() {
                out[[t, c]] += w * messages[[s, c]];
            }
        }
    }
    out
}

#[test]
fn lmpn_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // 3 nodes, 2 hyperedges: e0 = {0, 1}, e1 = {1, 2}.
    let nodes = Rc::new(vec![0, 1, 1, 2]);
    let edges = Rc::new(vec![0, 0, 1, 1]);
    let z = nn::uniform(&mut rng, 3, 4, 1.0);
    let u = nn::uniform(&mut rng, 2, 4, 1.0);
    let w = nn::uniform(&mut rng, 4, 4, 1.0);
    let (am, at) = (nn::uniform(&mut rng, 4, 1, 1.0), nn::uniform(&mut rng, 4, 1, 1.0));
    let tape = Tape::new();
    let zw = tape.constant(z.clone()).matmul(tape.constant(w.clone()));
    let got_u = lmpn_aggregate(zw, tape.constant(u.clone()), &nodes, &edges, 2, tape.constant(am.clone()), tape.constant(at.clone()));
    let inc = array![[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]];
    let want_u = dense_lmpn(&z.dot(&w), &u, &inc, &am, &at);
    let uw = tape.constant(u.clone()).matmul(tape.constant(w.clone()));
    let got_z = lmpn_aggregate(uw, tape.constant(z.clone()), &edges, &nodes, 3, tape.constant(am.clone()), tape.constant(at.clone()));
    let want_z = dense_lmpn(&u.dot(&w), &z, &inc.t().to_owned(), &am, &at);
    for (a, b) in got_u.value().iter().zip(want_u.iter()).chain(got_z.value().iter().zip(want_z.iter())) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn lmpn_attention_sums_to_one_per_neighbourhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = toy();
    let (n, e): (Vec<usize>, Vec<usize>) = h.incidences().iter().copied().unzip();
    let (n, e) = (Rc::new(n), Rc::new(e));
    let tape = Tape::new();
    let z = tape.constant(nn::uniform(&mut rng, 6, 4, 1.0));
    let u = tape.constant(nn::uniform(&mut rng, 4, 4, 1.0));
    let a = tape.constant(nn::uniform(&mut rng, 4, 1, 1.0));
    let (alpha, _) = lmpn_attention(z, u, &n, &e, 4, a, a);
    let mut sums = [0.0; 4];
    for (p, &edge) in e.iter().enumerate() {
        sums[edge] += alpha.value()[[p, 0]];
    }
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    let (alpha, _) = lmpn_attention(u, z, &e, &n, 6, a, a);
    let mut sums = [0.0; 6];
    for (p, &node) in n.iter().enumerate() {
        sums[node] += alpha.value()[[p, 0]];
    }
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
}

#[test]
fn lmpn_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let perm = [2usize, 0, 3, 1];
    let nodes = vec![0, 1, 1, 2, 3];
    let edges = vec![0, 0, 1, 1, 1];
    let z = nn::uniform(&mut rng, 4, 3, 1.0);
    let u = nn::uniform(&mut rng, 2, 3, 1.0);
    let a1 = nn::uniform(&mut rng, 3, 1, 1.0);
    let a2 = nn::uniform(&mut rng, 3, 1, 1.0);
    let run = |z: &Mat, nodes: &[usize]| {
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let uv = tape.constant(u.clone());
        let (nr, er) = (Rc::new(nodes.to_vec()), Rc::new(edges.clone()));
        let new_u = lmpn_aggregate(zv, uv, &nr, &er, 2, tape.constant(a1.clone()), tape.constant(a2.clone()));
        let new_z = lmpn_aggregate(new_u, zv, &er, &nr, 4, tape.constant(a1.clone()), tape.constant(a2.clone()));
        ((*new_u.value()).clone(), (*new_z.value()).clone())
    };
    let (u_ref, z_ref) = run(&z, &nodes);
    // Node i of the original graph becomes node perm[i].
    let mut zp = Mat::zeros(z.raw_dim());
    for i in 0..4 {
        zp.row_mut(perm[i]).assign(&z.row(i));
    }
    let np: Vec<usize> = nodes.iter().map(|&n| perm[n]).collect();
    let (u_p, z_p) = run(&zp, &np);
    assert!(u_ref.iter().zip(u_p.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    for i in 0..4 {
        for c in 0..3 {
            assert!((z_ref[[i, c]] - z_p[[perm[i], c]]).abs() < 1e-12);
        }
    }
}

fn set_kgan(enc: &mut KhgeEncoder, k: usize, name: &str, value: Mat) {
    *enc.params_mut().get_mut(&layer_key(k, name)).unwrap() = value;
}

#[test]
fn kgan_zero_query_key_is_uniform_average() {
    let mut enc = KhgeEncoder::new(small_config(1), flat_bias(5, 3), 1).unwrap();
    set_kgan(&mut enc, 0, "kgan.q", Mat::zeros((4, 4)));
    set_kgan(&mut enc, 0, "kgan.k", Mat::zeros((4, 4)));
    set_kgan(&mut enc, 0, "kgan.o", Mat::eye(4));
    let tape = Tape::new();
    let b = enc.params().bind(&tape);
    let z = b.var("embed");
    let (out, _) = enc.global_attention(&b, 0, z, None);
    let zv = enc.params().expect("embed").dot(enc.params().expect("l0.kgan.v"));
    let mean = zv.mean_axis(ndarray::Axis(0)).unwrap();
    for row in out.value().rows() {
        for (a, b) in row.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn kgan_bias_dominance_selects_self() {
    let mut enc = KhgeEncoder::new(small_config(1), flat_bias(5, 3), 2).unwrap();
    set_kgan(&mut enc, 0, "kgan.o", Mat::eye(4));
    let mut table = Mat::from_elem((2, 4), -1e9);
    table.column_mut(0).fill(0.0);
    set_kgan(&mut enc, 0, "kgan.bucket", table);
    let tape = Tape::new();
    let b = enc.params().bind(&tape);
    let (out, attn) = enc.global_attention(&b, 0, b.var("embed"), None);
    let zv = enc.params().expect("embed").dot(enc.params().expect("l0.kgan.v"));
    for (a, b) in out.value().iter().zip(zv.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
    for a in attn {
        for row in a.value().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn kgan_matches_scalar_oracle() {
    let mut enc = KhgeEncoder::new(small_config(1), flat_bias(4, 3), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    set_kgan(&mut enc, 0, "kgan.bucket", nn::uniform(&mut rng, 2, 4, 1.0));
    let p = enc.params().clone();
    let tape = Tape::new();
    let b = p.bind(&tape);
    let (out, _) = enc.global_attention(&b, 0, b.var("embed"), None);

    let z = p.expect("embed");
    let (wq, wk, wv, wo) = (p.expect("l0.kgan.q"), p.expect("l0.kgan.k"), p.expect("l0.kgan.v"), p.expect("l0.kgan.o"));
    let table = p.expect("l0.kgan.bucket");
    let (q, k, v) = (z.dot(wq), z.dot(wk), z.dot(wv));
    let (n, dh) = (4usize, 2usize);
    let mut concat = Mat::zeros((n, 4));
    for h in 0..2 {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[[i, h * dh + c]] * k[[j, h * dh + c]];
                }
                *l = (dot + table[[h, i.abs_diff(j).min(3)]]) / (dh as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..dh {
                concat[[i, h * dh + c]] = (0..n).map(|j| e[j] / s * v[[j, h * dh + c]]).sum();
            }
        }
    }
    let want = concat.dot(wo);
    for (a, b) in out.value().iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn single_layer_average_is_the_layer() {
    let h = toy();
    let enc = KhgeEncoder::new(small_config(1), flat_bias(6, 3), 4).unwrap();
    let tape = Tape::new();
    let b = enc.params().bind(&tape);
    let out = enc.forward(&b, &AugmentedView::full(&h, 4)).unwrap();
    assert_eq!(*out.z.value(), *out.layer_z[0].value());
    assert_eq!(*out.u.value(), *out.layer_u[0].value());
}

#[test]
fn multi_layer_output_is_average_of_captured_layers() {
    let h = toy();
    let enc = KhgeEncoder::new(small_config(4), flat_bias(6, 3), 4).unwrap();
    let tape = Tape::new();
    let b = enc.params().bind(&tape);
    let out = enc.forward(&b, &AugmentedView::full(&h, 4)).unwrap();
    let mut sum = Mat::zeros((6, 4));
    for z in &out.layer_z {
        sum += &*z.value();
    }
    sum /= 4.0;
    assert!(sum.iter().zip(out.z.value().iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(out.z.value().iter().all(|x| x.is_finite()));
    assert_eq!(out.u.shape(), (4, 4));
}

#[test]
fn feature_mask_zeroes_layer_input_dimension() {
    let h = toy();
    let enc = KhgeEncoder::new(small_config(2), flat_bias(6, 3), 4).unwrap();
    let rates = DropRates { node: 0.0, incidence: 0.0, feature: 0.5 };
    let view = (0..100)
        .map(|s| augment(&h, rates, 4, s).unwrap())
        .find(|v| v.feature_mask().iter().any(|&k| !k))
        .unwrap();
    let c = view.feature_mask().iter().position(|&k| !k).unwrap();
    let tape = Tape::new();
    let b = enc.params().bind(&tape);
    let out = enc.forward(&b, &view).unwrap();
    assert!(out.input_z.value().column(c).iter().all(|&x| x == 0.0));
}

#[test]
fn hyperedge_without_survivors_gets_zero_update() {
    // Node 1 dropped: hyperedge 3 = {1} loses its only incidence.
    let h = toy();
    let mut enc = KhgeEncoder::new(small_config(1), flat_bias(6, 3), 4).unwrap();
    let rates = DropRates { node: 0.4, incidence: 0.0, feature: 0.0 };
    let view = (0..200)
        .map(|s| augment(&h, rates, 4, s).unwrap())
        .find(|v| !v.kept_nodes()[1])
        .unwrap();
    assert!(!view.alive_hyperedges()[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    *enc.params_mut().get_mut("l0.edge.ln_b").unwrap() = nn::uniform(&mut rng, 1, 4, 1.0);
    let tape = Tape::new();
    let b = enc.params().bind(&tape);
    let out = enc.forward(&b, &view).unwrap();
    // Zero input and zero update: only the normalization offset remains.
    let row = out.u.value().row(3).to_owned();
    let offset = enc.params().expect("l0.edge.ln_b").row(0).to_owned();
    assert!(row.iter().zip(offset.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn gradients_match_finite_differences() {
    let h = toy();
    for layers in [1, 2] {
        for norm in [NormPlacement::Post, NormPlacement::Pre] {
            let config = EncoderConfig { norm, ..small_config(layers) };
            let mut enc = KhgeEncoder::new(config, flat_bias(6, 3), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for k in 0..layers {
                set_kgan(&mut enc, k, "kgan.bucket", nn::uniform(&mut rng, 2, 4, 0.5));
            }
            let rates = DropRates { node: 0.2, incidence: 0.2, feature: 0.0 };
            let view = augment(&h, rates, 4, 1).unwrap();
            let wz = nn::uniform(&mut rng, 6, 4, 1.0);
            let wu = nn::uniform(&mut rng, 4, 4, 1.0);
            let report = check_gradients(enc.params(), 1e-5, 1, |b| {
                let out = enc.forward(b, &view).unwrap();
                let t = out.z.tape();
                out.z.mul(t.constant(wz.clone())).sum().add(out.u.mul(t.constant(wu.clone())).sum())
            });
            assert!(report.max_rel_error <= 1e-3, "layers {layers} {norm:?}: {report:?}");
            assert!(report.checked > 100);
        }
    }
}

#[test]
fn bucket_table_stays_symmetric() {
    let enc = KhgeEncoder::new(small_config(1), flat_bias(5, 3), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = nn::uniform(&mut rng, 2, 4, 1.0);
    for h in 0..2 {
        let om = enc.knowledge_bias().omega(&table, h);
        assert_eq!(om, om.t());
    }
}

#[test]
fn forward_is_deterministic() {
    let h = toy();
    let enc = KhgeEncoder::new(small_config(2), flat_bias(6, 3), 8).unwrap();
    let view = augment(&h, DropRates::default(), 4, 5).unwrap();
    let run = || {
        let tape = Tape::new();
        let b = enc.params().bind(&tape);
        let out = enc.forward(&b, &view).unwrap();
        ((*out.z.value()).clone(), (*out.u.value()).clone())
    };
    assert_eq!(run(), run());
    let again = KhgeEncoder::new(small_config(2), flat_bias(6, 3), 8).unwrap();
    assert_eq!(again, enc);
}

#[test]
fn nan_reports_layer() {
    let h = toy();
    let mut enc = KhgeEncoder::new(small_config(2), flat_bias(6, 3), 8).unwrap();
    enc.params_mut().get_mut("l1.ffn.b2").unwrap()[[0, 0]] = f64::NAN;
    let err = enc.embed(&h).unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("layer 2"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn config_validation() {
    let bad = EncoderConfig { dim: 6, heads: 4, ..EncoderConfig::default() };
    assert!(matches!(KhgeEncoder::new(bad, flat_bias(3, 8), 0), Err(Error::Config(_))));
    let zero = EncoderConfig { layers: 0, ..EncoderConfig::default() };
    assert!(zero.validate().is_err());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let enc = KhgeEncoder::new(small_config(2), flat_bias(6, 3), 8).unwrap();
    enc.save(dir.path(), "diag").unwrap();
    let back = KhgeEncoder::load(dir.path(), "diag", Some(enc.config())).unwrap();
    assert_eq!(back, enc);
    let other = small_config(3);
    assert!(matches!(KhgeEncoder::load(dir.path(), "diag", Some(&other)), Err(Error::Checkpoint(_))));
}
