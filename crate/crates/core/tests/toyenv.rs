use buds_core::env::*;
use buds_core::hbc::{HbcConfig, HierarchicalController, MetaController, SkillPolicy};
use buds_core::metrics::success_rate;
use proptest::prelude::*;

fn all_specs() -> Vec<TaskSpec> {
    TaskId::ALL
        .into_iter()
        .flat_map(|t| (1..=3).map(move |v| TaskSpec::new(t, v).unwrap()))
        .collect()
}

#[test]
fn scripted_expert_solves_every_spec() {
    let obs = ObservationModel::default();
    for spec in all_specs() {
        for seed in 0..100 {
            let demo = scripted_demo(&spec, seed, 0.01, &obs)
                .unwrap_or_else(|e| panic!("{spec:?} seed {seed}: {e}"));
            let last = demo.states.last().unwrap();
            let fin = env_step(last, demo.actions.last().unwrap());
            assert!(spec.goal(&fin), "{spec:?} seed {seed}");
            assert!(!spec.goal(last));
        }
    }
}

#[test]
fn demo_labels_follow_stage_order() {
    let obs = ObservationModel::default();
    for spec in all_specs() {
        for seed in 0..20 {
            let demo = scripted_demo(&spec, seed, 0.01, &obs).unwrap();
            let mut runs = demo.trajectory.gt_stage_labels.unwrap();
            runs.dedup();
            let expected: Vec<i32> = spec.stages().iter().map(|s| s.label()).collect();
            assert_eq!(runs, expected);
        }
    }
}

#[test]
fn zero_initialized_hierarchy_never_succeeds() {
    let obs = ObservationModel::default();
    let cfg = HbcConfig::default();
    let state_dim: usize = modalities().iter().map(|m| m.dim).sum();
    let mut skills: Vec<SkillPolicy> = (0..3)
        .map(|k| SkillPolicy::init(k, state_dim, ACTION_DIM, &cfg))
        .collect();
    let mut meta = MetaController::init("kitchen", 3, state_dim, cfg.subgoal_dim, &cfg);
    skills.iter_mut().for_each(|s| s.params.iter_mut().for_each(|p| *p = 0.0));
    meta.params.iter_mut().for_each(|p| *p = 0.0);
    for spec in all_specs() {
        let results: Vec<RolloutResult> = (0..100)
            .map(|seed| {
                let mut c = HierarchicalController::new(&meta, &skills, seed).unwrap();
                rollout(&mut c, &spec, seed, 400, &obs)
            })
            .collect();
        assert_eq!(success_rate("zero", &results).unwrap().value, 0.0);
        assert!(results.iter().all(|r| r.steps <= 400));
    }
}

fn arb_action() -> impl Strategy<Value = Action> {
    (-0.2f64..0.2, -0.2f64..0.2, -1.0f64..1.0).prop_map(|(x, y, g)| [x, y, g])
}

proptest! {
    #[test]
    fn random_actions_keep_state_valid(
        seed in 0u64..500,
        task in 0usize..3,
        variant in 1u32..=3,
        actions in proptest::collection::vec(arb_action(), 1..200),
    ) {
        let spec = TaskSpec::new(TaskId::ALL[task], variant).unwrap();
        let mut s = env_reset(&spec, seed);
        for a in &actions {
            let prev = s.clone();
            s = env_step(&s, a);
            for p in [s.robot, s.block, s.tool, s.knob] {
                prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert!((0.0..=1.0).contains(&s.drawer_open));
            prop_assert!((0.0..=1.0).contains(&s.gripper));
            prop_assert_eq!(s.steps, prev.steps + 1);
            match s.held {
                Some(o) => prop_assert_eq!(s.object(o), s.robot),
                None => {
                    prop_assert_eq!(s.knob, [DRAWER_CLOSED_X - DRAWER_TRAVEL * s.drawer_open, DRAWER_Y]);
                }
            }
            if prev.held.is_none() || prev.held == s.held {
                for o in [Object::Block, Object::Tool] {
                    if s.held != Some(o) {
                        prop_assert_eq!(s.object(o), prev.object(o));
                    }
                }
            }
        }
    }

    #[test]
    fn observations_depend_only_on_state_and_noise_stream(seed in 0u64..1000) {
        use rand::SeedableRng;
        let obs = ObservationModel::default();
        let s = env_reset(&TaskSpec::new(TaskId::Kitchen, 1).unwrap(), seed);
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(obs.observe(&s, &mut a), obs.observe(&s, &mut b));
    }
}
