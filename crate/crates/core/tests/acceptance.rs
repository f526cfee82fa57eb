//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; exits non-zero if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use flowaudit::consistency::{classify, Action, CollectionStatement, Disclosure, DisclosureVerdict, FlowKey};
use flowaudit::destination::{
    missed_by_blocklists, AppMeta, Blocklist, CloudSuffixes, EntityMap, Labeler, ListFormat, Party, SuffixList,
};
use flowaudit::extract::{self, Category, DataFlow, Detection, RuleKind, RuleSet};
use flowaudit::ingest::{Direction, HttpTransaction};
use flowaudit::metrics::{macro_average, micro, per_class_metrics, validate, ConfusionMatrix, MacroF1, MetricRow};
use flowaudit::ontology::{self, Ontology, OntologyKind, TermRef};
use flowaudit::pipeline::{self as pl, PipelineConfig, ReportFormat};
use flowaudit::purpose::{self, AnnotatedSegment, FunctionalClass, PurposeLabel};
use flowaudit::sigscan::{self, SignatureSpec};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn demo_config(output: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&manifest_dir().join("fixtures/demo/config.yaml")).expect("demo config");
    cfg.output_dir = output.to_path_buf();
    cfg
}

// 1. Gold disclosure fixtures, one per class.
fn gold_disclosures() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = demo_config(tmp.path());
    cfg.validate().map_err(|e| e.to_string())?;
    let (txns, _) = pl::stage_ingest(&cfg).map_err(|e| e.to_string())?;
    let flows = pl::stage_extract(&cfg, &txns).map_err(|e| e.to_string())?;
    let labels = pl::stage_label(&cfg, &flows).map_err(|e| e.to_string())?;
    let verdicts = pl::stage_check(&cfg, &flows, &labels).map_err(|e| e.to_string())?;
    let expected = [
        ("com.cvr.terminus", "Usage Time", "we", Disclosure::Clear),
        (
            "com.HomeNetGames.WW1oculus",
            "Serial Number",
            "oculus",
            Disclosure::Vague,
        ),
        ("com.kluge.SynthRiders", "System Version", "oculus", Disclosure::Omitted),
        ("com.SDI.TWD", "Serial Number", "oculus", Disclosure::Ambiguous),
        (
            "com.downpourinteractive.onward",
            "Device ID",
            "unity",
            Disclosure::Incorrect,
        ),
    ];
    ensure(verdicts.len() == expected.len(), || {
        format!("{} verdicts, expected 5", verdicts.len())
    })?;
    for (app, dt, entity, class) in expected {
        let v = verdicts
            .iter()
            .find(|v| v.app == app && v.data_type == dt)
            .ok_or_else(|| format!("no verdict for {app} {dt}"))?;
        ensure(v.flow.entity.node.as_deref() == Some(entity), || {
            format!("{app}: entity {:?}, expected {entity}", v.flow.entity.node)
        })?;
        ensure(v.class == class, || {
            format!("{app} {dt}: {:?}, expected {class:?}", v.class)
        })?;
    }
    Ok("5/5 fixtures classified as expected".into())
}

// 2. Subsumption against a Warshall closure.
fn closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<u64>> {
    let words = n.div_ceil(64);
    let mut reach = vec![vec![0u64; words]; n];
    for &(c, p) in edges {
        reach[c][p / 64] |= 1 << (p % 64);
    }
    for k in 0..n {
        let row_k = reach[k].clone();
        for row in reach.iter_mut() {
            if row[k / 64] >> (k % 64) & 1 == 1 {
                for (w, r) in row.iter_mut().zip(&row_k) {
                    *w |= r;
                }
            }
        }
    }
    reach
}

fn check_against_oracle(ont: &Ontology, names: &[String], edges: &[(usize, usize)]) -> Result<usize, String> {
    let reach = closure(names.len(), edges);
    let refs: Vec<TermRef> = names.iter().map(|n| ont.resolve(n)).collect();
    let mut pairs = 0;
    for (d, dref) in refs.iter().enumerate() {
        for (a, aref) in refs.iter().enumerate() {
            let want = a == d || reach[d][a / 64] >> (a % 64) & 1 == 1;
            let got = ont.subsumes(aref, dref).map_err(|e| e.to_string())?;
            ensure(got == want, || {
                format!("subsumes({}, {}) = {got}, oracle {want}", names[a], names[d])
            })?;
            pairs += 1;
        }
    }
    Ok(pairs)
}

fn shipped_edges(file: &str) -> (Vec<String>, Vec<(usize, usize)>) {
    let text = std::fs::read_to_string(manifest_dir().join("data").join(file)).expect("ontology file");
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut names = Vec::new();
    let mut edges = Vec::new();
    let mut id = |s: &str, names: &mut Vec<String>| {
        *index.entry(s.to_string()).or_insert_with(|| {
            names.push(s.to_string());
            names.len() - 1
        })
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (c, p) = line.split_once('\t').expect("tab-separated edge");
        let c = id(c.trim(), &mut names);
        let p = id(p.trim(), &mut names);
        edges.push((c, p));
    }
    (names, edges)
}

fn ontology_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x0a70);
    let mut pairs = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let density = rng.random_range(0.005..0.08);
        let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..i {
                if rng.random_bool(density) {
                    edges.push((perm[i], perm[j]));
                }
            }
        }
        let named: Vec<(String, String)> = edges
            .iter()
            .map(|&(c, p)| (names[c].clone(), names[p].clone()))
            .collect();
        let ont = Ontology::build(OntologyKind::Data, &named, &names, &[]).map_err(|e| e.to_string())?;
        pairs += check_against_oracle(&ont, &names, &edges)?;
    }
    for (file, ont, expected_nodes) in [
        ("data_ontology.tsv", ontology::bundled_data(), 63),
        ("entity_ontology.tsv", ontology::bundled_entity(), 64),
    ] {
        let (names, edges) = shipped_edges(file);
        ensure(ont.len() == expected_nodes && names.len() == expected_nodes, || {
            format!(
                "{file}: {} nodes loaded, {} in file, expected {expected_nodes}",
                ont.len(),
                names.len()
            )
        })?;
        pairs += check_against_oracle(&ont, &names, &edges)?;
    }
    Ok(format!(
        "100 random DAGs + shipped ontologies (63/64 nodes), {pairs} pairs agree"
    ))
}

// 3. Collect-only statements never lower the consistent count.
fn statement(ont_d: &Ontology, ont_e: &Ontology, d: &str, e: &str, action: Action, id: usize) -> CollectionStatement {
    CollectionStatement {
        app: "app".into(),
        entity: ont_e.resolve(e),
        action,
        data_type: ont_d.resolve(d),
        sentence_id: format!("s{id}"),
        sentence: format!("sentence {id}"),
        source_policy: "app".into(),
    }
}

fn monotonicity() -> Outcome {
    let data = ontology::bundled_data();
    let entity = ontology::bundled_entity();
    let dnodes: Vec<String> = data.nodes().to_vec();
    let enodes: Vec<String> = entity.nodes().to_vec();
    let mut rng = StdRng::seed_from_u64(0x3303);
    let mut total_gain = 0usize;
    for case in 0..500 {
        let pick = |rng: &mut StdRng, v: &[String]| v[rng.random_range(0..v.len())].clone();
        let flows: Vec<FlowKey> = (0..rng.random_range(1..20))
            .map(|_| FlowKey {
                data_type: data.resolve(&pick(&mut rng, &dnodes)),
                entity: entity.resolve(&pick(&mut rng, &enodes)),
            })
            .collect();
        let mut stmts: Vec<CollectionStatement> = (0..rng.random_range(0..15))
            .map(|i| {
                let action = if rng.random_bool(0.5) {
                    Action::Collect
                } else {
                    Action::NotCollect
                };
                let (d, e) = (pick(&mut rng, &dnodes), pick(&mut rng, &enodes));
                statement(&data, &entity, &d, &e, action, i)
            })
            .collect();
        let count = |stmts: &[CollectionStatement]| -> Result<usize, String> {
            let mut n = 0;
            for f in &flows {
                if classify(f, stmts, &data, &entity)
                    .map_err(|e| e.to_string())?
                    .is_consistent()
                {
                    n += 1;
                }
            }
            Ok(n)
        };
        let before = count(&stmts)?;
        for i in 0..rng.random_range(1..10) {
            let (d, e) = (pick(&mut rng, &dnodes), pick(&mut rng, &enodes));
            stmts.push(statement(&data, &entity, &d, &e, Action::Collect, 100 + i));
        }
        let after = count(&stmts)?;
        ensure(after >= before, || {
            format!("case {case}: consistent {before} -> {after}")
        })?;
        total_gain += after - before;
    }
    Ok(format!("500 instances, no decrease (total gain {total_gain})"))
}

// 4. Extraction fixtures.
const EMAIL: &str = "alice.vr@example.org";
const SERIAL: &str = "1WMHH0A0B1C2D3";
const ANDROID_ID: &str = "9774d56d682e549c";
// Digests computed independently (Python hashlib) and frozen here.
const EMAIL_MD5: &str = "a281fde31071e9b07c3c872473ddb3b1";
const EMAIL_SHA1: &str = "4b953096406a260651bc6b678ccca63071f2848f";
const SERIAL_SHA1: &str = "b82f1e531e1826262591d7587a15f5cc92d55307";
const ANDROID_ID_MD5: &str = "cf95dc53f383f9a836fd749f3ef439cd";

fn extraction_rules() -> Result<RuleSet, String> {
    let specs: Vec<extract::RuleSpec> = serde_yaml::from_str(pl::BUNDLED_RULES).map_err(|e| e.to_string())?;
    let profile: extract::Profile = serde_yaml::from_str(&format!(
        "static_values:\n  email: {EMAIL}\n  serial_number: {SERIAL}\n  android_id: '{ANDROID_ID}'\n  \
         device_id: dev-7f3a91\n  first_name: Mirabel\n  last_name: Okonkwo\n  os_version_string: 10.4.2\n"
    ))
    .map_err(|e| e.to_string())?;
    RuleSet::compile(&extract::resolve_rules(&specs, &profile)).map_err(|e| e.to_string())
}

struct Case {
    query: &'static str,
    headers: Vec<(&'static str, String)>,
    body: String,
    direction: Direction,
    expected: &'static [&'static str],
}

fn case(query: &'static str, headers: &[(&'static str, &str)], body: &str, expected: &'static [&'static str]) -> Case {
    Case {
        query,
        headers: headers.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        body: body.to_string(),
        direction: Direction::Request,
        expected,
    }
}

fn extraction_corpus() -> Vec<Case> {
    let mut cases = vec![
        case("user_id=8812", &[], "", &["User ID"]),
        case(
            "",
            &[(
                "User-Agent",
                "UnityPlayer/2020.1.14 (UnityWebRequest/1.0, libcurl/7.52.0-DEV)",
            )],
            "",
            &["SDK Version"],
        ),
        case("", &[("X-Unity-Version", "2020.3.18f1")], "", &["SDK Version"]),
        case("", &[], r#"{"email":"someone@test.io"}"#, &["Email"]),
        case("", &[], &format!(r#"{{"contact":"{EMAIL}"}}"#), &["Email"]),
        case("", &[], &format!("h={EMAIL_MD5}"), &["Email"]),
        case("", &[("X-Hash", &SERIAL_SHA1.to_uppercase())], "", &["Serial Number"]),
        case("", &[], &format!("sn={SERIAL}"), &["Serial Number"]),
        case("android_id=abc", &[], "", &["Android ID"]),
        case(
            "",
            &[],
            &format!(r#"{{"payload":"{ANDROID_ID_MD5}"}}"#),
            &["Android ID"],
        ),
        case("deviceid=zz", &[], "", &["Device ID"]),
        case("", &[], "first=Mirabel&last=Okonkwo", &["Person Name"]),
        case("countryCode=US&timeZoneOffset=-7", &[], "", &["Geolocation"]),
        case("", &[], r#"{"app_name":"Beat","gameVersion":"1.2"}"#, &["App Name"]),
        case("build_guid=abc", &[], "", &["Build Version"]),
        case("", &[("Cookie", "sid=1")], "", &["Cookies"]),
        case("", &[], r#"{"device_info_flags":3}"#, &["Flags", "Hardware Info"]),
        case(
            "",
            &[],
            r#"{"gpu_vendor":"Qualcomm","screen_size":"3664x1920"}"#,
            &["Hardware Info"],
        ),
        case("", &[], "engine=UE4&sdk_ver=4.27", &["SDK Version"]),
        case("", &[], r#"{"session_id":"s1","partyID":"p"}"#, &["Session Info"]),
        case("os_version=10", &[], "", &["System Version"]),
        case("", &[], r#"{"osv":"10.4.2"}"#, &["System Version"]),
        case("t_since_start=77&seconds_played=9", &[], "", &["Usage Time"]),
        case("", &[], r#"{"language":"en-US"}"#, &["Language"]),
        case("", &[], r#"{"vr_field_of_view":90}"#, &["VR Field of View"]),
        case(
            "",
            &[],
            r#"{"vr_position":[0,1,2],"gyroscope":[0,0,0]}"#,
            &["VR Movement"],
        ),
        case("", &[], r#"{"vr_play_area_geometry":"poly"}"#, &["VR Play Area"]),
        case("", &[], r#"{"vr_user_device_ipd":63.5}"#, &["VR Pupillary Distance"]),
        case(
            "user_id=1&email=x@y.z",
            &[("X-Unity-Version", "2019.4.1f1")],
            &format!(r#"{{"vr_user_device_ipd":63,"mail":"{EMAIL_SHA1}"}}"#),
            &["Email", "SDK Version", "User ID", "VR Pupillary Distance"],
        ),
    ];
    let mut response = case("user_id=1", &[], "", &[]);
    response.direction = Direction::Response;
    cases.push(response);
    cases
}

fn digest_hit(dets: &[Detection], data_type: &str, digest: &str) -> bool {
    dets.iter()
        .any(|d| d.kind == RuleKind::Hash && d.data_type == data_type && d.matched.eq_ignore_ascii_case(digest))
}

fn extraction_fixtures() -> Outcome {
    use md5::Digest as _;
    for (value, md5_hex, sha1_hex) in [(EMAIL, EMAIL_MD5, EMAIL_SHA1), (ANDROID_ID, ANDROID_ID_MD5, "")] {
        ensure(hex::encode(md5::Md5::digest(value.as_bytes())) == md5_hex, || {
            format!("md5 oracle mismatch for {value}")
        })?;
        if !sha1_hex.is_empty() {
            ensure(hex::encode(sha1::Sha1::digest(value.as_bytes())) == sha1_hex, || {
                format!("sha1 oracle mismatch for {value}")
            })?;
        }
    }
    let rules = extraction_rules()?;
    let cases = extraction_corpus();
    ensure(cases.len() == 30, || format!("corpus has {} transactions", cases.len()))?;
    let txns: Vec<HttpTransaction> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| HttpTransaction {
            app: "com.example.vr".into(),
            ts_us: i as u64,
            host: "api.example.net".into(),
            sni: None,
            method: "POST".into(),
            path: "/e".into(),
            query: c.query.into(),
            headers: c.headers.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            body: c.body.clone().into_bytes(),
            direction: c.direction,
        })
        .collect();
    let dets = extract::scan_all(&txns, &rules);
    for (i, c) in cases.iter().enumerate() {
        let got: BTreeSet<&str> = dets
            .iter()
            .filter(|d| d.txn == i)
            .map(|d| d.data_type.as_str())
            .collect();
        let want: BTreeSet<&str> = c.expected.iter().copied().collect();
        ensure(got == want, || {
            format!("transaction {i}: got {got:?}, expected {want:?}")
        })?;
    }
    let of = |i: usize| dets.iter().filter(|d| d.txn == i).cloned().collect::<Vec<_>>();
    ensure(digest_hit(&of(5), "Email", EMAIL_MD5), || {
        "no MD5 hit for the email".into()
    })?;
    ensure(digest_hit(&of(6), "Serial Number", SERIAL_SHA1), || {
        "no SHA1 hit for the serial".into()
    })?;
    ensure(digest_hit(&of(9), "Android ID", ANDROID_ID_MD5), || {
        "no MD5 hit for the android id".into()
    })?;
    ensure(digest_hit(&of(28), "Email", EMAIL_SHA1), || {
        "no SHA1 hit for the email".into()
    })?;
    ensure(
        of(1)
            .iter()
            .any(|d| d.kind == RuleKind::Pattern && d.matched == "UnityPlayer/2020.1.14"),
        || "UnityPlayer/2020.1.14 not matched by pattern".into(),
    )?;
    Ok("30 transactions match expected data-type sets; 4 digest hits verified".into())
}

// 5. Party, ATS and missed-by-blocklists fixtures.
fn party_and_ats() -> Outcome {
    let lists = vec![Blocklist::parse("fixture", "unity3d.com\n", Some(ListFormat::Domains))];
    let labeler = Labeler::new(
        SuffixList::bundled(false),
        EntityMap::new(vec![]),
        CloudSuffixes::default(),
        lists,
    );
    let terminus = AppMeta {
        package: "com.cvr.terminus".into(),
        policy_url: "https://terminus.com/privacy".into(),
        ..Default::default()
    };
    let cases = [
        ("graph.oculus.com", Party::Platform),
        ("terminus.firebaseapp.com", Party::First),
        ("terminus-prod.s3.amazonaws.com", Party::First),
        ("api.mixpanel.com", Party::Third),
    ];
    for (fqdn, want) in cases {
        let got = labeler.categorize_party(fqdn, &terminus);
        ensure(got == want, || format!("{fqdn}: {got:?}, expected {want:?}"))?;
    }
    let host = "perf-events.cloud.unity3d.com";
    let (ats, matched) = labeler.match_ats(host, &labeler.esld(host));
    ensure(ats && matched == vec!["fixture".to_string()], || {
        format!("{host} not matched via parent domain")
    })?;

    let flow = |host: &str, dt: &str| DataFlow {
        app: "com.example.vr".into(),
        data_type: dt.into(),
        category: Category::Fingerprint,
        destination: host.into(),
        evidence: vec![],
    };
    let types = [
        "App Name",
        "Build Version",
        "Cookies",
        "Flags",
        "Hardware Info",
        "Language",
        "SDK Version",
        "Session Info",
        "System Version",
        "Usage Time",
        "User ID",
    ];
    let mut flows: Vec<DataFlow> = ["Flags", "Language"]
        .iter()
        .map(|t| flow("a.smalltracker.io", t))
        .collect();
    flows.extend(types.iter().map(|t| flow("collect.bigtracker.io", t)));
    flows.extend(types.iter().take(5).map(|t| flow("events.unity3d.com", t)));
    let metas = BTreeMap::from([("com.example.vr".to_string(), AppMeta::bare("com.example.vr"))]);
    let labels = labeler.label_flows(&flows, &metas);
    let missed = missed_by_blocklists(&flows, &labels);
    ensure(missed.len() == 2, || {
        format!("{} missed hosts, expected 2", missed.len())
    })?;
    ensure(
        missed[0].fqdn == "collect.bigtracker.io" && missed[0].data_types.len() == 11,
        || {
            format!(
                "first missed row {:?} with {} types",
                missed[0].fqdn,
                missed[0].data_types.len()
            )
        },
    )?;
    Ok("platform/first/third parties, parent-domain ATS match, 11-type host ranked first".into())
}

// 6. Metrics.
fn metrics() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x6006);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..8);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0..50)).collect())
            .collect();
        let cm = ConfusionMatrix::new((0..k).map(|i| format!("c{i}")).collect(), counts).map_err(|e| e.to_string())?;
        let Some(m) = micro(&cm) else { continue };
        let acc = (0..k).map(|i| cm.true_positives(i)).sum::<u64>() as f64 / cm.total() as f64;
        for v in [m.precision, m.recall, m.f1] {
            worst = worst.max((v - acc).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("micro identity off by {worst:e}"))?;

    let labels = vec!["consistent".to_string(), "incorrect".to_string(), "omitted".to_string()];
    let cm = ConfusionMatrix::new(labels.clone(), vec![vec![335, 1, 118], vec![0, 2, 0], vec![24, 1, 400]])
        .map_err(|e| e.to_string())?;
    let report = validate(
        &cm,
        &BTreeSet::from(["incorrect".into(), "omitted".into()]),
        MacroF1::HarmonicOfMeans,
    )
    .map_err(|e| e.to_string())?;
    let printed = [(0.93, 0.74, 0.82, 454), (0.50, 1.00, 0.67, 2), (0.77, 0.94, 0.85, 425)];
    for (row, (p, r, f, s)) in report.rows.iter().zip(printed) {
        let close = |x: Option<f64>, y: f64| x.is_some_and(|x| (x - y).abs() <= 0.005);
        ensure(
            close(row.precision, p) && close(row.recall, r) && close(row.f1, f) && row.support == s,
            || format!("{} row {:?}", row.label, row),
        )?;
    }
    let m = report.macro_avg.ok_or("no macro average")?;
    let target = (0.74, 0.89, 0.81);
    let within = |a: &flowaudit::metrics::Averages| {
        (a.precision - target.0).abs() <= 0.005
            && (a.recall - target.1).abs() <= 0.005
            && (a.f1 - target.2).abs() <= 0.005
    };
    ensure(within(&m), || {
        format!(
            "macro from per-class values {:.4}/{:.4}/{:.4}",
            m.precision, m.recall, m.f1
        )
    })?;

    // The same rule applied to the two-decimal per-class values as printed.
    let rounded: Vec<MetricRow> = printed
        .iter()
        .zip(&labels)
        .map(|(&(p, r, f, s), l)| MetricRow {
            label: l.clone(),
            precision: Some(p),
            recall: Some(r),
            f1: Some(f),
            support: s,
        })
        .collect();
    let mr = macro_average(&rounded, MacroF1::HarmonicOfMeans).ok_or("no macro average")?;
    let per_class = per_class_metrics(&cm);
    ensure(per_class.len() == 3, || "three classes".into())?;
    Ok(format!(
        "micro identity on 1000 matrices (max dev {worst:.1e}); macro {:.4}/{:.4}/{:.4} vs 0.74/0.89/0.81 \
         (two-decimal inputs give {:.4}/{:.4}/{:.4}{})",
        m.precision,
        m.recall,
        m.f1,
        mr.precision,
        mr.recall,
        mr.f1,
        if within(&mr) {
            ""
        } else {
            ", precision outside tolerance"
        }
    ))
}

// 7. Signature round trip.
fn naive_find(blob: &[u8], pattern: &[u8]) -> Vec<u64> {
    (0..=blob.len().saturating_sub(pattern.len()))
        .filter(|&i| blob.len() >= pattern.len() && &blob[i..i + pattern.len()] == pattern)
        .map(|i| (i + sigscan::PREAMBLE_LEN) as u64)
        .collect()
}

fn sigscan_roundtrip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x7007);
    for i in 0..100 {
        let len = rng.random_range(64..8192);
        // A small alphabet makes accidental repeats likely for short blobs.
        let alphabet = if i % 4 == 0 { 2 } else { 256 };
        let mut blob: Vec<u8> = (0..len).map(|_| rng.random_range(0..alphabet) as u8).collect();
        let offset = rng.random_range(sigscan::PREAMBLE_LEN..len - sigscan::PREFIX_LEN) as u64;
        let sig = sigscan::extract_signature(&blob, offset, "f").map_err(|e| e.to_string())?;
        if rng.random_bool(0.3) {
            let copy_at = rng.random_range(0..len - 20);
            let pattern = sig.pattern();
            blob[copy_at..copy_at + 20].copy_from_slice(&pattern);
        }
        let got: Vec<u64> = sigscan::locate(&blob, &sig).iter().map(|h| h.offset).collect();
        let want = naive_find(&blob, &sig.pattern());
        ensure(got == want, || format!("blob {i}: hits {got:?}, oracle {want:?}"))?;
    }
    let json =
        r#"{"label":"unity","preamble":"FD FD FF 17","prefix":"F7 5B BD A9 F5 53 01 A9 F3 7B 02 A9 F4 03 02 AA"}"#;
    let unity: SignatureSpec = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let bytes = sigscan::parse_hex("FD FD FF 17 F7 5B BD A9 F5 53 01 A9 F3 7B 02 A9 F4 03 02 AA", "fixture")
        .map_err(|e| e.to_string())?;
    ensure(unity.pattern().as_slice() == bytes.as_slice(), || {
        "signature bytes altered".into()
    })?;
    let at = 0x814468usize;
    let mut blob = vec![0u8; at + 64];
    blob[at - 4..at + 16].copy_from_slice(&bytes);
    let hits: Vec<u64> = sigscan::locate(&blob, &unity).iter().map(|h| h.offset).collect();
    ensure(hits == vec![at as u64], || format!("unity fixture hits {hits:?}"))?;
    Ok("100 blobs agree with naive scan; fixture signature located at 0x814468".into())
}

// 8. Determinism and stage equivalence.
fn read_dir_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        out.insert(
            e.file_name().to_string_lossy().into_owned(),
            std::fs::read(e.path()).map_err(|e| e.to_string())?,
        );
    }
    Ok(out)
}

fn stage_by_stage(cfg: &PipelineConfig) -> Result<(), pl::PipelineError> {
    let out = &cfg.output_dir;
    let (txns, _) = pl::stage_ingest(cfg)?;
    pl::write_records(&out.join(pl::TRANSACTIONS_FILE), &txns, "ingest")?;
    let txns = pl::read_transactions(&out.join(pl::TRANSACTIONS_FILE))?;
    let flows = pl::stage_extract(cfg, &txns)?;
    pl::write_records(&out.join(pl::FLOWS_FILE), &flows, "extract")?;
    let flows: Vec<DataFlow> = pl::read_records(&out.join(pl::FLOWS_FILE), "label")?;
    let labels = pl::stage_label(cfg, &flows)?;
    pl::write_records(&out.join(pl::LABELS_FILE), &labels, "label")?;
    let labels = pl::read_records(&out.join(pl::LABELS_FILE), "check")?;
    let verdicts = pl::stage_check(cfg, &flows, &labels)?;
    pl::write_records(&out.join(pl::VERDICTS_FILE), &verdicts, "check")?;
    let verdicts: Vec<DisclosureVerdict> = pl::read_records(&out.join(pl::VERDICTS_FILE), "purpose")?;
    let purposed = pl::stage_purpose(cfg, &verdicts)?;
    pl::write_records(&out.join(pl::PURPOSES_FILE), &purposed, "purpose")?;
    let purposed = pl::read_records(&out.join(pl::PURPOSES_FILE), "report")?;
    let bundle = pl::stage_report(&flows, &labels, &verdicts, &purposed);
    pl::write_report(out, &bundle, &ReportFormat::ALL)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let cfg = demo_config(&tmp.path().join(name));
        pl::run_pipeline(&cfg, &ReportFormat::ALL).map_err(|e| e.to_string())?;
        runs.push(read_dir_files(&cfg.output_dir)?);
    }
    let cfg = demo_config(&tmp.path().join("staged"));
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| e.to_string())?;
    stage_by_stage(&cfg).map_err(|e| e.to_string())?;
    let staged = read_dir_files(&cfg.output_dir)?;
    ensure(runs[0].len() == 8, || format!("{} artifacts written", runs[0].len()))?;
    ensure(runs[0] == runs[1], || "two full runs differ".into())?;
    for (name, bytes) in &runs[0] {
        ensure(staged.get(name) == Some(bytes), || {
            format!("{name} differs between full and staged runs")
        })?;
    }
    Ok("8 artifacts byte-identical across runs and stage-by-stage".into())
}

// 9. Purpose matching and expansion.
const WORDS: [&str; 16] = [
    "we", "use", "your", "data", "to", "improve", "games", "show", "ads", "measure", "traffic", "keep", "accounts",
    "safe", "partners", "share",
];

fn oracle_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| w.len() >= 2)
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

fn oracle_match(sentence: &str, segment: &str) -> bool {
    let s = oracle_words(sentence);
    oracle_words(segment).is_superset(&s)
        || segment
            .split(['.', '!', '?'])
            .map(oracle_words)
            .any(|w| !w.is_empty() && w.is_subset(&s))
}

fn random_sentence(rng: &mut StdRng) -> String {
    let n = rng.random_range(2..7);
    let words: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    words.join(" ")
}

fn purposes() -> Outcome {
    let named: Vec<PurposeLabel> = PurposeLabel::ALL
        .into_iter()
        .filter(|p| *p != PurposeLabel::Unspecific)
        .collect();
    let core: Vec<_> = named
        .iter()
        .filter(|p| p.functional_class() == FunctionalClass::Core)
        .collect();
    let unrelated: Vec<_> = named
        .iter()
        .filter(|p| p.functional_class() == FunctionalClass::Unrelated)
        .collect();
    ensure(named.len() == 9 && core.len() == 5 && unrelated.len() == 4, || {
        format!(
            "partition {}/{} over {} labels",
            core.len(),
            unrelated.len(),
            named.len()
        )
    })?;

    let data = ontology::bundled_data();
    let entity = ontology::bundled_entity();
    let mut rng = StdRng::seed_from_u64(0x9009);
    let mut total_records = 0;
    for case in 0..200 {
        let segments: Vec<AnnotatedSegment> = (0..rng.random_range(1..6))
            .map(|i| {
                let text = (0..rng.random_range(1..4))
                    .map(|_| random_sentence(&mut rng))
                    .collect::<Vec<_>>()
                    .join(". ");
                let labels: Vec<PurposeLabel> = named.iter().copied().filter(|_| rng.random_bool(0.2)).collect();
                AnnotatedSegment::new("app", &format!("seg{i}"), &text, &labels)
            })
            .collect();
        for seg in &segments {
            for _ in 0..3 {
                let sentence = random_sentence(&mut rng);
                let got = purpose::matching_segments(&sentence, std::slice::from_ref(seg)).count() == 1;
                ensure(got == oracle_match(&sentence, &seg.text), || {
                    format!("case {case}: {sentence:?} vs {:?}", seg.text)
                })?;
            }
        }
        let verdicts: Vec<DisclosureVerdict> = (0..rng.random_range(1..8))
            .map(|i| {
                let sentence = if rng.random_bool(0.5) {
                    let seg = &segments[rng.random_range(0..segments.len())];
                    seg.text.split(". ").next().unwrap_or_default().to_string()
                } else {
                    random_sentence(&mut rng)
                };
                let mut stmt = statement(&data, &entity, "pii", "third party", Action::Collect, i);
                stmt.sentence = sentence;
                DisclosureVerdict {
                    app: "app".into(),
                    data_type: "Email".into(),
                    category: Category::Pii,
                    destination: format!("h{i}.example.com"),
                    flow: FlowKey {
                        data_type: data.resolve("email address"),
                        entity: entity.resolve("facebook"),
                    },
                    class: if rng.random_bool(0.8) {
                        Disclosure::Vague
                    } else {
                        Disclosure::Omitted
                    },
                    matched_collect: vec![stmt],
                    matched_not_collect: vec![],
                    conflicting_sentences: vec![],
                }
            })
            .collect();
        let first_only = rng.random_bool(0.5);
        let mut expected = 0;
        for v in verdicts.iter().filter(|v| v.is_consistent()) {
            let set = purpose::annotate_flow(v, &segments, first_only).map_err(|e| e.to_string())?;
            if !set.keys().all(|p| *p == PurposeLabel::Unspecific) {
                expected += set.len();
            }
        }
        let (records, tallies) = purpose::purposes_for(&verdicts, &segments, first_only);
        ensure(records.len() == expected, || {
            format!("case {case}: {} records, expected {expected}", records.len())
        })?;
        ensure(tallies.core + tallies.unrelated == records.len(), || {
            format!("case {case}: tallies do not add up")
        })?;
        total_records += records.len();
    }
    Ok(format!(
        "200 cases, {total_records} records; 9 labels split 5 core / 4 unrelated"
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("disclosure gold fixtures", Duration::from_secs(1), gold_disclosures),
        ("ontology subsumption oracle", Duration::from_secs(10), ontology_oracle),
        ("consistency monotonicity", Duration::from_secs(10), monotonicity),
        ("extraction fixtures", Duration::from_secs(1), extraction_fixtures),
        ("party and ATS fixtures", Duration::from_secs(1), party_and_ats),
        ("metrics", Duration::from_secs(5), metrics),
        ("signature round trip", Duration::from_secs(5), sigscan_roundtrip),
        ("pipeline determinism", Duration::from_secs(5), determinism),
        ("purpose layer", Duration::from_secs(2), purposes),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if elapsed <= limit => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took {elapsed:.2?}, limit {limit:?}")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} criterion {} ({name}) [{elapsed:.2?}]: {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
