use std::collections::HashMap;

use commute_core::anchors::FilterConfig;
use commute_core::pipeline::{analyze_cohort, AnalysisConfig, AnalysisContext};
use commute_core::synth::{generate_cohort, LayoutConfig, SynthConfig, SyntheticCohort};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = SynthConfig> {
    (any::<u64>(), 3usize..25, 2usize..4, prop::sample::select(&[30u32, 60, 120, 300][..]), any::<bool>()).prop_map(
        |(seed, n_agents, n_days, interval, transit)| SynthConfig {
            seed,
            n_agents,
            n_days,
            emission_interval_s: interval,
            transit_emission: transit,
            isolated_anchor_agents: 1,
            layout: LayoutConfig {
                grid_cols: 20,
                grid_rows: 20,
                ..LayoutConfig::default()
            },
            ..SynthConfig::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn same_seed_same_bytes(cfg in config()) {
        let (t1, r1, g1) = generate_cohort(&cfg).unwrap();
        let (t2, r2, g2) = generate_cohort(&cfg).unwrap();
        prop_assert_eq!(t1, t2);
        prop_assert!(r1 == r2);
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn records_never_contradict_the_truth(cfg in config()) {
        let cohort = SyntheticCohort::generate(&cfg).unwrap();
        for (i, a) in cohort.truth.agents.iter().enumerate() {
            let records = cohort.agent_records(i);
            for day in &a.days {
                let (m, n) = (day.morning, day.night);
                prop_assert!(m.depart_s < m.arrive_s && m.arrive_s <= n.depart_s && n.depart_s < n.arrive_s);
                let today: Vec<_> = records.iter().filter(|r| r.start.date() == day.date).collect();
                for r in &today {
                    let t = r.start.second_of_day();
                    if t <= m.depart_s || t >= n.arrive_s {
                        prop_assert_eq!(r.cell, a.home);
                    } else if t >= m.arrive_s && t <= n.depart_s {
                        prop_assert_eq!(r.cell, a.work);
                    } else {
                        prop_assert!(cfg.transit_emission, "record during silent transit");
                    }
                }
                // The last home record before the trip is at most the true
                // departure; the first work record after it is at least the
                // true arrival.
                let last_home = today.iter().rfind(|r| r.start.second_of_day() <= m.depart_s);
                prop_assert!(last_home.is_some_and(|r| r.cell == a.home));
                let first_work = today.iter().find(|r| r.cell == a.work && r.start.second_of_day() > m.depart_s);
                prop_assert!(first_work.is_none_or(|r| r.start.second_of_day() >= m.arrive_s || cfg.transit_emission));
            }
        }
    }

    #[test]
    fn estimates_bound_the_truth_from_above(cfg in config()) {
        let cfg = SynthConfig { transit_emission: false, ..cfg };
        let cohort = SyntheticCohort::generate(&cfg).unwrap();
        let analysis_cfg = AnalysisConfig {
            filter: FilterConfig { min_daily_records: 200, ..FilterConfig::default() },
            ..AnalysisConfig::default()
        };
        let ctx = AnalysisContext::new(&cohort.towers, &analysis_cfg).unwrap();
        let analysis = analyze_cohort(&ctx, cohort.n_agents(), |u| cohort.agent_records(u.index())).unwrap();
        let truth: HashMap<_, _> = (0..cohort.n_agents())
            .flat_map(|i| cohort.truth.observations(i))
            .map(|o| ((o.user, o.date, o.direction), o.duration_s()))
            .collect();
        let bound = 2 * cfg.emission_interval_s as i64;
        for o in analysis.observations() {
            let t = truth[&(o.user, o.date, o.direction)];
            prop_assert!((t..=t + bound).contains(&o.duration_s()), "{} vs {t}", o.duration_s());
        }
    }
}
