mod common;

use mari_core::exec::{check_equivalence, EquivConfig, InputBundle, Session, Strategy};
use mari_core::graph::{fixture_ranking_model, matmul_site, parse, ModelDims, NodeKind, SiteDims};
use mari_core::reorg::{plan_reorg, reorg_all};
use mari_core::rewrite::{fragment_site, rewrite_all, rewrite_site};
use mari_core::{Error, Graph};

fn concat_layout(g: &Graph, id: &str) -> mari_core::FeatureLayout {
    match &g.by_name(id).unwrap().kind {
        NodeKind::Concat { layout } => layout.clone(),
        k => panic!("`{id}` is {k:?}"),
    }
}

fn assert_equivalent(a: &Graph, b: &Graph) {
    let v = check_equivalence::<f64>(a, b, &EquivConfig::for_element::<f64>(4, 9, 3)).unwrap();
    assert!(v.pass, "deviation {:.3e}", v.max_deviation);
    let v = check_equivalence::<f32>(a, b, &EquivConfig::for_element::<f32>(4, 9, 3)).unwrap();
    assert!(v.pass, "f32 deviation {:.3e}", v.max_deviation);
}

// The concat also feeds an output through a reshape, so reorganization has
// to work on a copy and leave the original readers alone.
const SHARED_CONCAT: &str = "\
u = Input([7],unbatched) inputs=[] domain=User
i = Input([19],batched) inputs=[] domain=Item
r = Reshape([19]) inputs=[i] domain=none
t = Tile() inputs=[u] domain=none
x = Concat() inputs=[r,t] domain=none layout=[(Item,19),(User,7)]
w = Weight(26,5,seed=1) inputs=[] domain=none
mm = MatMul() inputs=[x,w] domain=none
side = Reshape([26]) inputs=[x] domain=none
out = Output() inputs=[mm] domain=none
side_out = Output() inputs=[side] domain=none
";

#[test]
fn shared_concat_is_copied_not_moved() {
    let g = parse(SHARED_CONCAT).unwrap();
    let reorged = reorg_all(&g).unwrap();
    assert_eq!(concat_layout(&reorged, "x"), concat_layout(&g, "x"));
    assert!(concat_layout(&reorged, "x~reorg").is_neat());
    assert!(reorged.id("side~reorg").is_none(), "paths to non-matmul readers are not copied");
    assert_equivalent(&g, &reorged);

    let (r, report) = rewrite_all(&g).unwrap();
    assert_eq!(report.sites.len(), 1);
    assert!(report.sites[0].reorganized);
    assert!(r.id("x~reorg").is_none(), "the copy is dead once the matmul is split");
    assert!(r.id("x").is_some());
    assert_equivalent(&g, &r);
}

#[test]
fn fixture_rewrite_reports_every_site() {
    for fragmented in [false, true] {
        let dims = ModelDims { fragmented, ..ModelDims::default() };
        let g = fixture_ranking_model(&dims).unwrap();
        let (r, report) = rewrite_all(&g).unwrap();
        assert_eq!(report.site_groups(), 3);
        assert_eq!(report.sites.len(), 1 + dims.experts + dims.tasks);
        for s in &report.sites {
            assert_eq!(s.reorganized, fragmented, "{}", s.matmul);
            assert!(matches!(r.by_name(&s.matmul).unwrap().kind, NodeKind::MatMulMaRI { .. }));
            assert!(s.split[0] > 0 && s.split[1] + s.split[2] > 0);
        }
        assert_equivalent(&g, &r);
    }
}

#[test]
fn rewritten_fixture_saves_what_the_model_predicts() {
    let g = fixture_ranking_model(&ModelDims::default()).unwrap();
    let (r, report) = rewrite_all(&g).unwrap();
    let b = 17;
    let bundle = InputBundle::<f64>::random(&g, b, 5).unwrap();
    let before = Session::new(&g).run(&bundle, Strategy::Uoi).unwrap();
    let after = Session::new(&r).run(&bundle, Strategy::Uoi).unwrap();
    let mut predicted = 0;
    for s in &report.sites {
        let f = s.flops(b).unwrap();
        assert_eq!(before.flops_of(&s.matmul), Some(f.flops_baseline), "{}", s.matmul);
        assert_eq!(after.flops_of(&s.matmul), Some(f.flops_optimized), "{}", s.matmul);
        predicted += f.absolute_saving;
    }
    assert_eq!(before.flops_total - after.flops_total, predicted);
}

#[test]
fn rewrite_is_a_no_op_under_vanilla_inputs_too() {
    let g = fixture_ranking_model(&ModelDims { fragmented: true, ..ModelDims::default() }).unwrap();
    let (r, _) = rewrite_all(&g).unwrap();
    let cfg = EquivConfig {
        strategy_a: Strategy::VanI,
        ..EquivConfig::for_element::<f64>(3, 6, 8)
    };
    assert!(check_equivalence::<f64>(&g, &r, &cfg).unwrap().pass);
}

#[test]
fn fragmented_site_matches_for_every_chunk() {
    let g = matmul_site(SiteDims { du: 37, di: 20, dc: 11, d: 6 }, 4).unwrap();
    let neat = rewrite_site(&g, "mm", &concat_layout(&g, "x")).unwrap();
    for chunk in [1, 5, 16, 37, 100] {
        let f = fragment_site(&neat, "mm", chunk).unwrap();
        assert_equivalent(&g, &f);
        let plain = fragment_site(&g, "mm", chunk).unwrap();
        assert_equivalent(&g, &plain);
    }
    assert!(matches!(fragment_site(&neat, "mm", 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn degenerate_sites_rewrite_to_a_single_block() {
    for (du, di, dc) in [(0, 4, 0), (5, 0, 0), (0, 0, 3), (2, 0, 3)] {
        let g = matmul_site(SiteDims { du, di, dc, d: 3 }, 2).unwrap();
        let r = rewrite_site(&g, "mm", &concat_layout(&g, "x")).unwrap();
        let NodeKind::MatMulMaRI { split } = r.by_name("mm").unwrap().kind else { panic!() };
        assert_eq!(split, [du, di, dc]);
        assert_equivalent(&g, &r);
    }
}

#[test]
fn neat_fixture_needs_no_reorganization() {
    let g = fixture_ranking_model(&ModelDims::default()).unwrap();
    for id in ["q_cat", "mmoe_cat", "tower_cat"] {
        assert!(plan_reorg(&concat_layout(&g, id)).is_identity(), "{id}");
    }
    assert_eq!(reorg_all(&g).unwrap(), g);
}
