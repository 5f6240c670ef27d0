use collectivekv::collective::{
    assemble_kv, balance_loss, collective_forward, gather_collective, mean_routing_distribution,
    peak_loss, route, CollectiveConfig, CollectiveParams, Linear, Mode, RoutingMap, Side,
    SideParams,
};
use collectivekv::numkit::{sigmoid, Matrix, Rng};

fn setup(seed: u64, tie: bool) -> (CollectiveConfig, CollectiveParams, Matrix) {
    let mut c = CollectiveConfig::new(6, 2, 5, 7);
    c.tie_routers = tie;
    let mut rng = Rng::new(seed);
    let p = CollectiveParams::init(&c, &mut rng).unwrap();
    (c, p, rng.normal_matrix(9, 6, 1.0))
}

#[test]
fn ties_route_to_lowest_index() {
    let map = RoutingMap::from_logits(Matrix::from_rows(&[
        vec![1.0, 3.0, 3.0],
        vec![0.0, 0.0, 0.0],
    ]));
    assert_eq!(map.indices, vec![1, 0]);
    assert_eq!(map.selected_logit(0), 3.0);
}

#[test]
fn route_is_argmax_of_linear_logits() {
    let head = Linear {
        weight: Matrix::from_rows(&[vec![1.0, -1.0, 0.0]]),
        bias: Matrix::row_vector(&[0.0, 0.0, 0.5]),
    };
    let s = Matrix::from_rows(&[vec![2.0], vec![-2.0], vec![0.1]]);
    assert_eq!(route(&s, &head).unwrap().indices, vec![0, 1, 2]);
}

#[test]
fn training_gather_is_gated_and_inference_is_plain() {
    let pool = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let map = RoutingMap::from_logits(Matrix::from_rows(&[vec![0.5, -1.0], vec![0.0, 2.0]]));
    let infer = gather_collective(&pool, &map, Mode::Inference).unwrap();
    assert_eq!(infer, Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let train = gather_collective(&pool, &map, Mode::Training).unwrap();
    let (g0, g1) = (sigmoid(0.5), sigmoid(2.0));
    assert_eq!(
        train,
        Matrix::from_rows(&[vec![g0, 2.0 * g0], vec![3.0 * g1, 4.0 * g1]])
    );
    let short = Matrix::zeros(1, 2);
    assert!(gather_collective(&short, &map, Mode::Inference).is_err());
}

#[test]
fn forward_layout_is_user_then_collective() {
    let (c, p, s) = setup(1, false);
    let out = collective_forward(&s, &c, &p, Mode::Inference).unwrap();
    assert_eq!(out.keys.shape(), (9, 7));
    let SideParams::Shared {
        projection, pool, ..
    } = &p.keys
    else {
        panic!("keys should be shared")
    };
    let user = projection.forward(&s).unwrap();
    let map = out.trace.routing(Side::Keys).unwrap();
    for i in 0..9 {
        assert_eq!(&out.keys.row(i)[..2], user.row(i));
        assert_eq!(&out.keys.row(i)[2..], pool.row(map.indices[i]));
    }
}

#[test]
fn saturated_gates_make_modes_agree() {
    let (c, mut p, s) = setup(2, false);
    for side in [&mut p.keys, &mut p.values] {
        if let SideParams::Shared {
            router: Some(r), ..
        } = side
        {
            r.bias.as_mut_slice()[0] = 1e3;
        }
    }
    let a = collective_forward(&s, &c, &p, Mode::Training).unwrap();
    let b = collective_forward(&s, &c, &p, Mode::Inference).unwrap();
    assert!(a.keys.max_abs_diff(&b.keys) < 1e-12);
    assert!(a.values.max_abs_diff(&b.values) < 1e-12);
}

#[test]
fn tied_routers_share_indices() {
    let (c, p, s) = setup(3, true);
    let out = collective_forward(&s, &c, &p, Mode::Training).unwrap();
    let (k, v) = (
        out.trace.routing(Side::Keys).unwrap(),
        out.trace.routing(Side::Values).unwrap(),
    );
    assert_eq!(k.indices, v.indices);
    let (_, untied, _) = setup(3, false);
    assert!(p.tensors().len() < untied.tensors().len());
}

#[test]
fn baseline_is_plain_projection() {
    let c = CollectiveConfig::baseline(6, 8);
    let mut rng = Rng::new(4);
    let p = CollectiveParams::init(&c, &mut rng).unwrap();
    let s = rng.normal_matrix(5, 6, 1.0);
    let out = collective_forward(&s, &c, &p, Mode::Training).unwrap();
    let SideParams::Full(proj) = &p.keys else {
        panic!("baseline keys are full")
    };
    assert_eq!(out.keys, proj.forward(&s).unwrap());
    assert_eq!(out.aux.total, 0.0);
    assert!(out.trace.routing(Side::Keys).is_none());
}

#[test]
fn aux_losses_follow_their_formulas() {
    let (c, p, s) = setup(5, false);
    let out = collective_forward(&s, &c, &p, Mode::Training).unwrap();
    let mut peak = 0.0;
    let mut balance = 0.0;
    for side in [Side::Keys, Side::Values] {
        let map = out.trace.routing(side).unwrap();
        let n = map.len() as f64;
        peak += -(0..map.len())
            .map(|i| sigmoid(map.selected_logit(i)).ln())
            .sum::<f64>()
            / n;
        let m = map.logits.cols() as f64;
        balance += mean_routing_distribution(map)
            .iter()
            .map(|q| q * (q * m).ln())
            .sum::<f64>();
    }
    assert!((out.aux.peak - peak / 2.0).abs() < 1e-12);
    assert!((out.aux.balance - balance / 2.0).abs() < 1e-12);
    let want = c.peak_weight * out.aux.peak + c.balance_weight * out.aux.balance;
    assert!((out.aux.total - want).abs() < 1e-12);
}

#[test]
fn loss_anchors() {
    let zero = RoutingMap::from_logits(Matrix::zeros(3, 5));
    assert!((peak_loss(&zero).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(balance_loss(&zero).unwrap() <= 1e-12);
    let hand = RoutingMap::from_logits(Matrix::from_rows(&[vec![3.0_f64.ln(), 0.0]]));
    assert!((balance_loss(&hand).unwrap() - 0.130812).abs() < 1e-6);
    // One-hot routing on a single row attains the ln m ceiling.
    let peaked = RoutingMap::from_logits(Matrix::from_rows(&[vec![800.0, 0.0, 0.0, 0.0]]));
    assert!((balance_loss(&peaked).unwrap() - 4.0_f64.ln()).abs() < 1e-9);
    assert!(peak_loss(&RoutingMap::from_logits(Matrix::zeros(0, 3))).is_err());
}

#[test]
fn config_validation() {
    assert!(CollectiveConfig::new(6, 0, 0, 7).validate().is_err());
    assert!(CollectiveConfig::new(6, 0, 5, 7).validate().is_ok());
    assert!(CollectiveConfig::new(6, 2, 5, 0).validate().is_err());
    let mut c = CollectiveConfig::new(6, 2, 5, 7);
    c.peak_weight = -1.0;
    assert!(c.validate().is_err());
    assert!(CollectiveConfig::new(6, 2, 5, 7).validate().is_ok());
}

#[test]
fn assemble_splits_back_exactly() {
    let mut rng = Rng::new(6);
    let (u, c) = (rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(4, 5, 1.0));
    let kv = assemble_kv(&u, &c).unwrap();
    assert_eq!(kv.slice_cols(0, 3), u);
    assert_eq!(kv.slice_cols(3, 8), c);
    assert_eq!(assemble_kv(&Matrix::zeros(4, 0), &c).unwrap(), c);
    assert!(assemble_kv(&u, &Matrix::zeros(3, 5)).is_err());
}
