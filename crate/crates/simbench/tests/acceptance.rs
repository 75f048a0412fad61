//! Acceptance run over the whole stack. Prints one PASS/FAIL line per
//! criterion, followed by the measurements behind it.
//!
//! A criterion listed in `KNOWN_RED` is reported as FAIL but does not fail
//! the process. Set `ACCEPTANCE_STRICT=1` to make every FAIL fatal.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use datashare_core::cuckoo::{CuckooFilter, CuckooParams};
use datashare_core::mspsi::{self, Corpus, Keyword, OpCounts, ServerKey};
use datashare_core::tokens::{
    self, schnorr, verify_authorized, AuthorizedMessage, Issuer, IssuerKeys, RateLimitPolicy, SpendRegistry, Token,
};
use datashare_core::crypto::KeyPair;
use datashare_leakage::{
    extract_mspsi, extract_num_doc, extract_one_bit, random_corpus, recover_document, uniqueness, CorpusSpec, Doc,
    BooleanOracle, MspsiOracle, NumDocOracle, OneBitOracle,
};
use datashare_simbench::e2e::run_e2e_sim;
use datashare_simbench::messaging::{
    population_exponent, run_bandwidth_model, run_full_stack, BandwidthConfig, FullStackConfig,
};
use datashare_simbench::psi::run_psi_bench;
use datashare_simbench::unobservability::run_suite;
use datashare_simbench::{SimConfig, MB};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Criteria that are known not to hold for this implementation. The
/// reasons are written next to each result.
const KNOWN_RED: &[u32] = &[];

struct Verdict {
    id: u32,
    title: &'static str,
    pass: bool,
    lines: Vec<String>,
    took: Duration,
}

fn run(id: u32, title: &'static str, f: impl FnOnce(&mut Vec<String>) -> bool) -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let pass = f(&mut lines);
    let v = Verdict {
        id,
        title,
        pass,
        lines,
        took: start.elapsed(),
    };
    println!(
        "C{:<2} {} {} ({:.1} s)",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.title,
        v.took.as_secs_f64()
    );
    for l in &v.lines {
        println!("      {l}");
    }
    v
}

fn check(lines: &mut Vec<String>, ok: bool, what: String) -> bool {
    lines.push(format!("[{}] {what}", if ok { "ok" } else { "FAIL" }));
    ok
}

fn keyword(i: u32) -> Keyword {
    format!("kw-{i}").into_bytes()
}

fn c1_mspsi_oracle(out: &mut Vec<String>) -> bool {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc1);
    let mut exact = 0;
    let mut false_negatives = 0u64;
    let mut false_positives = 0u64;
    let mut negatives = 0u64;
    let instances = 1000;
    for _ in 0..instances {
        let docs: Vec<BTreeSet<Keyword>> = (0..rng.gen_range(1..=50))
            .map(|_| (0..rng.gen_range(0..=30)).map(|_| keyword(rng.gen_range(0..150))).collect())
            .collect();
        let m = rng.gen_range(1..=10);
        let query: Vec<Keyword> = {
            let mut q = BTreeSet::new();
            while q.len() < m {
                q.insert(keyword(rng.gen_range(0..150)));
            }
            q.into_iter().collect()
        };
        let truth: Vec<usize> = docs.iter().map(|d| query.iter().filter(|k| d.contains(*k)).count()).collect();

        let key = ServerKey::generate(&mut rng);
        let tc = mspsi::precompute(&Corpus::new(docs.clone()), &key).expect("precompute");
        let (blinded, secret) = mspsi::blind(&query, &mut rng).expect("blind");
        let reply = mspsi::reply(&blinded, &key);
        if mspsi::process(&reply, &secret, &tc).expect("process").sizes == truth {
            exact += 1;
        }

        let cf = CuckooFilter::compress(tc.tags(), CuckooParams::for_elements(tc.len().max(1))).expect("compress");
        let approx = mspsi::process_counted(&reply, &secret, &cf, tc.doc_count(), &mut OpCounts::default())
            .expect("process")
            .sizes;
        for (&got, &want) in approx.iter().zip(&truth) {
            if got < want {
                false_negatives += (want - got) as u64;
            } else {
                false_positives += (got - want) as u64;
            }
            negatives += (m - want) as u64;
        }
    }
    let fpr = false_positives as f64 / negatives as f64;
    let mut ok = check(out, exact == instances, format!("raw tag collection exact on {exact}/{instances} instances"));
    ok &= check(out, false_negatives == 0, format!("filter false negatives: {false_negatives}"));
    ok &= check(
        out,
        fpr <= 1e-4,
        format!("filter FPR {:.5}% ({false_positives} of {negatives} absent probes), bound 0.01%", fpr * 100.0),
    );
    ok
}

fn c2_table_counters(out: &mut Vec<String>) -> bool {
    let (m, n, s) = (10u64, 1000u64, 100_000u64);
    let b = run_psi_bench(m as usize, n as usize, s as usize, 1).expect("bench");
    let mut ok = check(out, b.m as u64 == m && b.elements as u64 == s, format!("scenario m={} S={}", b.m, b.elements));
    ok &= check(
        out,
        b.mspsi.server_online.exponentiations == m,
        format!("MS-PSI server online exponentiations {} (want {m})", b.mspsi.server_online.exponentiations),
    );
    ok &= check(
        out,
        b.mspsi.client_online.exponentiations == 2 * m && b.mspsi.client_online.tag_hashes == m * n,
        format!(
            "MS-PSI client online {} exp + {} tag hashes (want {} + {})",
            b.mspsi.client_online.exponentiations,
            b.mspsi.client_online.tag_hashes,
            2 * m,
            m * n
        ),
    );
    ok &= check(
        out,
        b.mspsi.online_bytes == 2 * m * 32,
        format!("MS-PSI online payload {} B (want {})", b.mspsi.online_bytes, 2 * m * 32),
    );
    ok &= check(
        out,
        b.cpsi.client_online.exponentiations == 2 * m * n,
        format!("C-PSI client online exponentiations {} (want {})", b.cpsi.client_online.exponentiations, 2 * m * n),
    );
    let v = &b.vanilla.server_online;
    ok &= check(
        out,
        v.group_hashes == s && v.exponentiations == s + m * n,
        format!(
            "vanilla server online {} hash-to-group, {} exp (want {s}, {})",
            v.group_hashes,
            v.exponentiations,
            s + m * n
        ),
    );
    ok &= check(out, b.agree, "all three variants agree on intersection sizes".into());
    ok
}

fn c3_timing(out: &mut Vec<String>) -> bool {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc3);
    // 1000 documents of 100 keywords, no keyword shared, so every tag costs
    // its own exponentiation.
    let corpus = Corpus::new((0..1000u32).map(|d| (0..100u32).map(move |k| keyword(d * 100 + k))));
    let key = ServerKey::generate(&mut rng);
    let t = Instant::now();
    let mut publish_ops = OpCounts::default();
    let tc = mspsi::precompute_counted(&corpus, &key, &mut publish_ops).expect("precompute");
    let cf = CuckooFilter::compress(tc.tags(), CuckooParams::for_elements(tc.len())).expect("compress");
    let record_bytes = cf.to_bytes().len();
    let publish = t.elapsed();

    let query: Vec<Keyword> = (0..10u32).map(|i| keyword(i * 7919 % 100_000)).collect();
    let (blinded, secret) = mspsi::blind(&query, &mut rng).expect("blind");
    let reply = mspsi::reply(&blinded, &key);
    let t = Instant::now();
    let result = mspsi::process_counted(&reply, &secret, &cf, tc.doc_count(), &mut OpCounts::default()).expect("process");
    let one = t.elapsed();

    // Every other owner answers with its own key; the client work per reply
    // is the same whatever the key.
    let replies: Vec<_> = (0..999)
        .map(|_| mspsi::reply(&blinded, &ServerKey::generate(&mut rng)))
        .collect();
    let t = Instant::now();
    let mut hits = 0;
    for r in &replies {
        hits += mspsi::process_counted(r, &secret, &cf, tc.doc_count(), &mut OpCounts::default())
            .expect("process")
            .matches;
    }
    let all = t.elapsed();

    let mut ok = check(
        out,
        publish <= Duration::from_secs(70),
        format!(
            "publish 1000x100: {:.1} s for {} exp, {} tag hashes, filter {} B (bound 70 s)",
            publish.as_secs_f64(),
            publish_ops.exponentiations,
            publish_ops.tag_hashes,
            record_bytes
        ),
    );
    ok &= check(
        out,
        one <= Duration::from_millis(135),
        format!("process one 1000-doc reply: {:.1} ms (bound 135 ms)", one.as_secs_f64() * 1e3),
    );
    ok &= check(
        out,
        all <= Duration::from_secs(135),
        format!("process 999 owners: {:.1} s (bound 135 s)", all.as_secs_f64()),
    );
    out.push(format!(
        "[info] 999 padded replies download {:.2} MB",
        999.0 * datashare_messaging::ENVELOPE_LEN as f64 / MB
    ));
    out.push(format!("(sanity: {} of 10 keywords matched one document; {hits} spurious matches elsewhere)", result.sizes.iter().max().unwrap_or(&0)));
    ok
}

fn c4_cuckoo(out: &mut Vec<String>) -> bool {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc4);
    let tags: Vec<[u8; 16]> = (0..100_000)
        .map(|_| {
            let mut t = [0u8; 16];
            rng.fill_bytes(&mut t);
            t
        })
        .collect();
    let cf = CuckooFilter::compress(&tags, CuckooParams::for_elements(tags.len())).expect("compress");
    let size = cf.to_bytes().len();
    let missing = tags.iter().filter(|t| !cf.membership(*t)).count();
    let probes = 1_000_000u32;
    let mut positives = 0u32;
    let mut probe = [0u8; 16];
    for _ in 0..probes {
        rng.fill_bytes(&mut probe);
        positives += u32::from(cf.membership(&probe));
    }
    let fpr = f64::from(positives) / f64::from(probes);
    let mut ok = check(out, size <= 500_000, format!("serialized size {size} B (bound 500000)"));
    ok &= check(out, missing == 0, format!("false negatives: {missing}"));
    ok &= check(
        out,
        fpr <= 4e-5 * 2.5,
        format!("FPR {:.4}% over {probes} probes (bound 0.01%)", fpr * 100.0),
    );
    ok
}

fn c5_latency(out: &mut Vec<String>) -> bool {
    let mut ok = true;
    // (rate, journalists, days): enough conversation channels for several
    // thousand samples per setting.
    for (rate, n, days) in [(48.0, 6, 5.0), (4.0, 20, 8.0)] {
        let t = Instant::now();
        let r = run_full_stack(&FullStackConfig::new(n, rate, days, 5)).expect("full stack");
        let took = t.elapsed();
        let mean = r.mean_latency_min();
        let p95 = r.p95_latency_min();
        let samples = r.send_latency_min.len();
        out.push(format!(
            "rate {rate}/day: {samples} sends over {n} journalists x {days} days, mean {mean:.1} min, p95 {p95:.1} min"
        ));
        if rate == 48.0 {
            ok &= check(out, (mean - 30.0).abs() <= 3.0, format!("mean {mean:.1} min within 30 +- 3"));
            ok &= check(out, (p95 - 90.0).abs() <= 10.0, format!("p95 {p95:.1} min within 90 +- 10"));
        } else {
            ok &= check(out, (mean - 360.0).abs() <= 18.0, format!("mean {:.2} h within 6 h +- 5%", mean / 60.0));
            ok &= check(out, p95 <= 18.0 * 60.0, format!("p95 {:.2} h <= 18 h", p95 / 60.0));
        }
        ok &= check(out, took <= Duration::from_secs(60), format!("runtime {:.1} s (bound 60 s)", took.as_secs_f64()));
    }
    ok
}

fn c6_unobservability(out: &mut Vec<String>) -> bool {
    let suite = run_suite(1..=50, 48.0, 2.0, 3).expect("suite");
    let ks = suite.ks_passing(0.01);
    let mut ok = check(out, suite.lengths_identical(), "envelope lengths identical in every transcript".into());
    ok &= check(
        out,
        suite.address_p > 0.01,
        format!("address nibbles chi-square p = {:.3} (want > 0.01)", suite.address_p),
    );
    ok &= check(out, ks >= 47, format!("KS vs Exp(rate) passing in {ks}/50 seeds (want >= 47)"));
    // Stronger than the criterion asks: the upload times do not move at all.
    out.push(format!(
        "upload timelines identical with and without queued messages: {}; all queued messages delivered: {}",
        suite.times_identical(),
        suite.all_delivered()
    ));
    ok
}

fn c7_bandwidth(out: &mut Vec<String>) -> bool {
    let base = run_bandwidth_model(&BandwidthConfig::new(1000, 4.0, 1.0, 7)).expect("model");
    let model = base.model_mb_per_journalist_day();
    let b = &base.per_journalist;
    let mut ok = check(
        out,
        (model - 16.5).abs() <= 0.25 * 16.5,
        format!("N=1000, 4/day: {model:.2} MB per journalist-day (16.5 +- 25%)"),
    );
    out.push(format!(
        "breakdown MB: puts {:.3}, fetches {:.3}, notifications {:.3}, bulletin {:.3}; probe misses outside the model {:.3} (total {:.2})",
        b.puts / MB,
        b.fetches / MB,
        b.feed / MB,
        b.bulletin / MB,
        (b.next_slot_probes + b.collision_probes) / MB,
        base.total_mb_per_journalist_day()
    ));
    let sizes = [125, 250, 500, 1000];
    let mut reports = Vec::new();
    for n in sizes {
        reports.push(if n == 1000 {
            base.clone()
        } else {
            run_bandwidth_model(&BandwidthConfig::new(n, 4.0, 1.0, 7)).expect("model")
        });
    }
    let exponent = population_exponent(&reports, |b| b.model_total());
    let without_feed = population_exponent(&reports, |b| b.model_total() - b.feed);
    ok &= check(
        out,
        (exponent - 2.0).abs() <= 0.1,
        format!("totals-vs-N exponent {exponent:.3} over N = {sizes:?} (want 2.0 +- 0.1)"),
    );
    out.push(format!("exponent of the same totals without notifications: {without_feed:.3}"));
    ok
}

fn c8_tokens(out: &mut Vec<String>) -> bool {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc8);
    let policy = RateLimitPolicy {
        tokens_per_epoch: 200,
        ..RateLimitPolicy::default()
    };
    let mut issuer = Issuer::new(IssuerKeys::setup(&mut rng), policy);
    issuer.register("j").expect("register");
    let now = 1_000;
    let tokens: Vec<Token> = (0..100)
        .map(|_| tokens::issue(&mut issuer, "j", now, &mut rng).expect("issue").0)
        .collect();
    let mpk = *issuer.mpk();
    let rogue = {
        let mut other = Issuer::new(IssuerKeys::setup(&mut rng), policy);
        other.register("x").expect("register");
        tokens::issue(&mut other, "x", now, &mut rng).expect("issue").0
    };

    let transcript_clean = tokens.iter().all(|t| {
        let pk = t.public().to_bytes();
        issuer.transcript().iter().all(|msg| !msg.windows(pk.len()).any(|w| w == pk))
    });

    let bundles: Vec<AuthorizedMessage> = tokens.iter().map(|t| t.authorize(b"query", &mut rng)).collect();
    let mut forged = 0;
    let trials = 10_000;
    for trial in 0..trials {
        let i = rng.gen_range(0..bundles.len());
        let j = (i + 1 + rng.gen_range(0..bundles.len() - 1)) % bundles.len();
        let orig = &bundles[i];
        let mut b = orig.clone();
        match trial % 8 {
            0 | 1 => {
                // flip one random bit anywhere in the encoding
                let mut bytes = orig.to_bytes();
                let pos = rng.gen_range(0..bytes.len());
                bytes[pos] ^= 1 << rng.gen_range(0..8);
                match AuthorizedMessage::from_bytes(&bytes) {
                    Ok(parsed) => b = parsed,
                    Err(_) => continue,
                }
            }
            2 => {
                b.message = format!("query {trial}").into_bytes();
            }
            3 => b.credential = bundles[j].credential,
            4 => b.token_pk = bundles[j].token_pk,
            5 => b.signature = bundles[j].signature,
            6 => {
                // a fresh key signing for itself, wearing someone's credential
                let key = KeyPair::generate(&mut rng);
                b.token_pk = *key.public();
                b.signature = schnorr::sign(&key, &b.message, &mut rng);
            }
            _ => b = rogue.authorize(b"query", &mut rng),
        }
        let mut registry = SpendRegistry::in_memory();
        let accepted = verify_authorized(&b, &mpk, &mut registry, &policy, now).is_ok();
        if accepted && !bundles.contains(&b) {
            forged += 1;
        }
    }

    let mut registry = SpendRegistry::in_memory();
    let mut first_ok = 0;
    let mut replays_rejected = 0;
    for (t, b) in tokens.iter().zip(&bundles) {
        first_ok += usize::from(verify_authorized(b, &mpk, &mut registry, &policy, now).is_ok());
        let again = t.authorize(b"another message", &mut rng);
        let rejected = verify_authorized(b, &mpk, &mut registry, &policy, now + 1).is_err()
            && verify_authorized(&again, &mpk, &mut registry, &policy, now + 2).is_err();
        replays_rejected += usize::from(rejected);
    }

    let mut ok = check(out, forged == 0, format!("forged bundles accepted: {forged} of {trials} mutations"));
    ok &= check(out, first_ok == 100, format!("genuine bundles accepted on first spend: {first_ok}/100"));
    ok &= check(out, replays_rejected == 100, format!("replays rejected: {replays_rejected}/100"));
    ok &= check(
        out,
        transcript_clean,
        format!("issuer transcript ({} messages over 100 issuances) contains no pk_T", issuer.transcript().len()),
    );
    ok
}

fn sorted(mut v: Vec<Doc>) -> Vec<Doc> {
    v.sort();
    v
}

fn c9_leakage(out: &mut Vec<String>) -> bool {
    let ulim = 3;
    let mut alg1 = (0, 0);
    let mut alg2 = 0;
    let mut alg3 = 0;
    let mut alg3_worst = 0.0f64;
    let mut tight = 0;
    let mut rng = ChaCha20Rng::seed_from_u64(0xc9);
    let corpora = 100;
    for i in 0..corpora {
        let n = rng.gen_range(4..=12);
        let d = rng.gen_range(1..=5);
        let docs = match random_corpus(CorpusSpec::new(n, d), 9000 + i) {
            Ok(docs) => docs,
            Err(e) => panic!("corpus {i} (n={n}, d={d}): {e}"),
        };

        for doc in &docs {
            let mut o = OneBitOracle::new(&docs);
            let start: Doc = doc.iter().take(1).copied().collect();
            let r = recover_document(&mut o, &start, n);
            alg1.1 += 1;
            if r.matched && docs.contains(&r.doc) && o.queries() <= n as u64 {
                alg1.0 += 1;
            }
        }

        let identifiable = sorted(
            (0..docs.len())
                .filter(|&k| uniqueness(&docs, k).expect("uniqueness").is_some_and(|u| u <= ulim))
                .map(|k| docs[k].clone())
                .collect(),
        );
        let mut o = OneBitOracle::new(&docs);
        if sorted(extract_one_bit(&mut o, n, ulim)) == identifiable {
            alg2 += 1;
        }

        let mut o = NumDocOracle::new(&docs);
        let got = sorted(extract_num_doc(&mut o, n));
        let envelope = 2 * n * docs.len();
        if got == sorted(docs.clone()) && o.queries() <= envelope as u64 {
            alg3 += 1;
        }
        alg3_worst = alg3_worst.max(o.queries() as f64 / (n * docs.len()) as f64);

        let lim = rng.gen_range(1..=10);
        let mut o = MspsiOracle::new(&docs, lim, i).expect("oracle");
        let ext = extract_mspsi(&mut o, n, docs.len()).expect("extract");
        if ext == docs && o.queries() == n.div_ceil(lim) as u64 {
            tight += 1;
        }
    }
    let mut ok = check(out, alg1.0 == alg1.1, format!("single-document recovery within n queries: {}/{}", alg1.0, alg1.1));
    ok &= check(out, alg2 == corpora, format!("one-bit extraction returns exactly the u_D <= 3 documents: {alg2}/{corpora}"));
    ok &= check(
        out,
        alg3 == corpora,
        format!("document-count extraction complete within 2nd queries: {alg3}/{corpora} (worst {alg3_worst:.2} nd)"),
    );
    ok &= check(out, tight == corpora, format!("MS-PSI extraction complete in ceil(n/lim) queries: {tight}/{corpora}"));
    ok
}

fn c10_end_to_end(out: &mut Vec<String>) -> bool {
    let cfg = SimConfig {
        journalists: 10,
        cover_rate: 48.0,
        ..SimConfig::default()
    };
    let a = run_e2e_sim(&cfg).expect("e2e");
    let b = run_e2e_sim(&cfg).expect("e2e");
    let r = &a.reports;
    let c = &a.conversation;
    let mut ok = check(
        out,
        r.queries > 0 && r.all_correct_modulo_fpr(a.record_fpr),
        format!(
            "{} queries, {}/{} reports exact, {} overcount by filter false positives, {} wrong",
            r.queries, r.exact, r.expected, r.overcounts, r.wrong
        ),
    );
    let worst = c.latency_min.iter().copied().fold(0.0, f64::max);
    ok &= check(
        out,
        c.within_bound() && c.latency_min.len() == 10,
        format!(
            "conversation of {} messages completed={}, slowest {worst:.1} min, bound {:.0} min",
            c.latency_min.len(),
            c.completed,
            c.bound_min
        ),
    );
    ok &= check(out, a.trace_hash == b.trace_hash, format!("trace hash {} on both runs", &a.trace_hash[..16]));
    if let Some(d) = &a.owner_daily {
        out.push(format!(
            "[info] owner day at {} journalists x {} queries: {:.0} answers, {:.1} s compute, replies {:.2} MB padded ({:.2} MB unpadded)",
            d.journalists, d.queries_per_journalist_day, d.answers_per_day, d.compute_s, d.reply_mb_padded, d.reply_mb_unpadded
        ));
    }
    ok
}

fn main() {
    // Honour `cargo test -- <filter>` loosely: a filter naming a criterion
    // (for example `c7`) runs only that one.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-')).map(|a| a.to_lowercase());
    let criteria: Vec<(u32, &'static str, fn(&mut Vec<String>) -> bool)> = vec![
        (1, "MS-PSI equals brute force; filter has no false negatives", c1_mspsi_oracle),
        (2, "operation counters of the three PSI variants", c2_table_counters),
        (3, "desk-scale timing envelopes", c3_timing),
        (4, "cuckoo filter size and precision at 100k tags", c4_cuckoo),
        (5, "cover-traffic send latency", c5_latency),
        (6, "server transcripts hide queued messages", c6_unobservability),
        (7, "per-journalist bandwidth and population scaling", c7_bandwidth),
        (8, "token forgery, replay and issuer blindness", c8_tokens),
        (9, "leakage extraction algorithms", c9_leakage),
        (10, "ten-journalist deployment", c10_end_to_end),
    ];
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut verdicts = Vec::new();
    for (id, title, f) in criteria {
        if filter.as_ref().is_some_and(|f| *f != format!("c{id}")) {
            continue;
        }
        verdicts.push(run(id, title, f));
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    let fatal: Vec<u32> = failed.iter().copied().filter(|id| strict || !KNOWN_RED.contains(id)).collect();
    println!(
        "acceptance: {} passed, {} failed {:?}, known red {:?}",
        verdicts.len() - failed.len(),
        failed.len(),
        failed,
        KNOWN_RED
    );
    if !fatal.is_empty() {
        eprintln!("acceptance failed: {fatal:?}");
        std::process::exit(1);
    }
}
