//! Report schema and invariants over the scenario catalog and random
//! small scenarios.

use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use serde_json::Value;

use mcran::scenario::{replay, run, Scenario};

fn root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn catalog() -> Vec<Scenario> {
    let mut out = Vec::new();
    let mut paths: Vec<_> = std::fs::read_dir(root().join("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    for p in paths {
        let src = std::fs::read_to_string(&p).unwrap();
        out.push(Scenario::load_str(&src).unwrap_or_else(|e| panic!("{}: {e}", p.display())));
    }
    out
}

/// Field paths from the first column of every table in the report schema,
/// with `<class>` and `<group>` expanded.
fn documented_paths() -> BTreeSet<String> {
    let doc = std::fs::read_to_string(root().join("docs/report-schema.md")).unwrap();
    let mut raw = Vec::new();
    for line in doc.lines() {
        if let Some(rest) = line.strip_prefix("| `") {
            if let Some(end) = rest.find('`') {
                raw.push(rest[..end].to_owned());
            }
        }
    }
    let groups: Vec<String> = raw
        .iter()
        .filter(|p| p.starts_with("flows.") && !p.contains('<'))
        .map(|p| p.trim_start_matches("flows.").to_owned())
        .collect();
    let mut out = BTreeSet::new();
    for p in raw {
        if p.contains("<class>") {
            for c in ["mc", "commercial"] {
                out.insert(p.replace("<class>", c));
            }
        } else if p.contains("<group>") {
            for g in &groups {
                out.insert(p.replace("<group>", g));
            }
        } else {
            out.insert(p);
        }
    }
    out
}

/// Paths of a report, `[]` for array elements and `<name>` for the geometry
/// map keys. Leaves go to `out`, objects and arrays to `nodes`; `config` is a
/// single leaf.
fn report_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>, nodes: &mut BTreeSet<String>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_owned()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix == "positioning.geometries" {
                    "<name>"
                } else {
                    k.as_str()
                };
                let p = join(key);
                if p == "config" {
                    out.insert(p);
                    continue;
                }
                if x.is_object() || x.is_array() {
                    nodes.insert(p.clone());
                }
                report_paths(x, &p, out, nodes);
            }
        }
        Value::Array(a) => {
            for x in a {
                report_paths(x, &format!("{prefix}[]"), out, nodes);
            }
        }
        _ => {
            out.insert(prefix.to_owned());
        }
    }
}

fn assert_schema(report: &Value, documented: &BTreeSet<String>) {
    let (mut leaves, mut nodes) = (BTreeSet::new(), BTreeSet::new());
    report_paths(report, "", &mut leaves, &mut nodes);
    for p in &leaves {
        assert!(
            documented.contains(p),
            "{} reports undocumented field {p}",
            report["scenario"]
        );
    }
    for p in documented {
        let optional = p.contains("[]") || p.contains("<name>");
        let seen = leaves.contains(p) || nodes.contains(p);
        assert!(
            optional || seen,
            "{} lacks documented field {p}",
            report["scenario"]
        );
    }
}

fn assert_non_negative(v: &Value, path: &str) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                if k != "config" {
                    assert_non_negative(x, &format!("{path}.{k}"));
                }
            }
        }
        Value::Array(a) => a.iter().for_each(|x| assert_non_negative(x, path)),
        Value::Number(n) => assert!(n.as_f64().unwrap() >= 0.0, "{path} = {n}"),
        _ => {}
    }
}

#[test]
fn documented_fields_match_every_report() {
    let documented = documented_paths();
    assert!(documented.len() > 100);
    let mut scenarios = catalog();
    scenarios.push(Scenario::load_str("name = \"empty\"").unwrap());
    for scn in scenarios {
        let out = run(&scn, scn.seed).unwrap();
        let v: Value = serde_json::from_str(&out.report.to_json()).unwrap();
        assert_schema(&v, &documented);
        assert_non_negative(&v, "");
    }
}

#[test]
fn catalog_is_complete() {
    let names: BTreeSet<String> = catalog().into_iter().map(|s| s.name).collect();
    for n in [
        "overload",
        "deployable-coverage",
        "group-comms",
        "burning-building-positioning",
    ] {
        assert!(names.contains(n), "missing {n}");
    }
}

fn small_scenario(
    cells: u32,
    mc: u32,
    commercial: u32,
    prbs: u32,
    factor: f64,
    video: bool,
) -> String {
    let mut s = String::from("name = \"random\"\nduration_ms = 400\n");
    s += &format!("[[uac.categories]]\ncategory = 7\nbarring_factor = {factor}\nbarring_time_ms = 50\nexempt_identities = [1]\n");
    for c in 0..cells {
        s += &format!(
            "[[cells]]\nid = {c}\nposition = [{}.0, 0.0, 25.0]\ncapacity_prbs = {prbs}\n",
            c * 300
        );
    }
    let services = if video {
        "[\"mcptt-voice\", \"mc-video\"]"
    } else {
        "[\"mcptt-voice\"]"
    };
    for c in 0..cells {
        s += &format!(
            "[[ue_groups]]\nname = \"mc{c}\"\nclass = \"mc\"\ncount = {mc}\ncell = {c}\nservices = {services}\n\
             placement = {{ radius_m = 150.0 }}\naccess = {{ spread_ms = 200 }}\n"
        );
        s += &format!(
            "[[ue_groups]]\nname = \"com{c}\"\nclass = \"commercial\"\ncount = {commercial}\ncell = {c}\n\
             placement = {{ radius_m = 250.0 }}\naccess = {{ spread_ms = 200 }}\n"
        );
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_scenarios_are_deterministic_and_replayable(
        cells in 1u32..3,
        mc in 0u32..6,
        commercial in 0u32..20,
        prbs in 5u32..60,
        factor in 0.0f64..=1.0,
        video: bool,
        seed: u64,
    ) {
        let src = small_scenario(cells, mc, commercial, prbs, factor, video);
        let scn = Scenario::load_str(&src).unwrap();
        let a = run(&scn, seed).unwrap();
        let b = run(&scn, seed).unwrap();
        let json = a.report.to_json();
        prop_assert_eq!(&json, &b.report.to_json());
        prop_assert_eq!(&json, &replay(&a.events).to_json());
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_non_negative(&v, "");
        let adm = &a.report.admission;
        prop_assert_eq!(adm.evicted_not_preemptable, 0);
        prop_assert_eq!(adm.requests, adm.admitted + adm.rejected);
        prop_assert!(adm.mc_gbr_feasible_admitted <= adm.mc_gbr_feasible);
        prop_assert_eq!(a.report.access.mc.uac_barred, 0);
    }
}
