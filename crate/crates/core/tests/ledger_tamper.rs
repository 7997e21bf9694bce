use govsim_core::ledger::{read_entries, verify_attestation, verify_bytes};
use govsim_core::scenario::builtin;
use govsim_core::{run_scenario, Ledger, RunOptions, SimTime, VerifyResult};

const KEY: &[u8] = b"desk-auditor";

/// First `n` entries of a real run, re-appended into a fresh ledger.
fn run_ledger(n: usize) -> Ledger {
    let out = run_scenario(builtin("human_in_loop_demo").unwrap(), RunOptions { seed: Some(3), ..Default::default() }).unwrap();
    let mut l = Ledger::in_memory();
    for e in out.ledger.entries().iter().take(n) {
        l.append(e.at, &e.kind, e.payload.clone()).unwrap();
    }
    assert_eq!(l.len(), n);
    l
}

fn detected(bytes: &[u8]) -> bool {
    !matches!(verify_bytes(bytes), Ok(VerifyResult::Ok { .. }))
}

fn sweep(bytes: &[u8], values: impl Fn(u8) -> Vec<u8>) -> (usize, Vec<(usize, u8)>) {
    let mut buf = bytes.to_vec();
    let mut tried = 0;
    let mut missed = Vec::new();
    for pos in 0..bytes.len() {
        let orig = bytes[pos];
        for v in values(orig) {
            if v == orig {
                continue;
            }
            buf[pos] = v;
            tried += 1;
            if !detected(&buf) {
                missed.push((pos, v));
            }
        }
        buf[pos] = orig;
    }
    (tried, missed)
}

#[test]
fn every_byte_of_fifty_entries_is_covered() {
    let l = run_ledger(50);
    let bytes = l.to_bytes();
    assert_eq!(verify_bytes(&bytes).unwrap(), VerifyResult::Ok { entries: 50 });
    let (tried, missed) = sweep(&bytes, |b| {
        let mut v: Vec<u8> = (0..8).map(|i| b ^ (1 << i)).collect();
        v.extend([0x00, 0xFF, !b]);
        v
    });
    assert!(tried > bytes.len() * 8);
    assert!(missed.is_empty(), "undetected: {:?}", &missed[..missed.len().min(10)]);
}

#[test]
fn every_value_at_every_byte_of_a_short_ledger() {
    let l = run_ledger(4);
    let bytes = l.to_bytes();
    let (tried, missed) = sweep(&bytes, |_| (0..=255).collect());
    assert_eq!(tried, bytes.len() * 255);
    assert!(missed.is_empty(), "undetected: {:?}", &missed[..missed.len().min(10)]);
}

#[test]
fn broken_verdict_locates_the_damaged_entry() {
    let l = run_ledger(10);
    let mut entries = l.entries().to_vec();
    entries[6].payload.push(b' ');
    assert_eq!(govsim_core::ledger::verify_entries(&entries), VerifyResult::Broken { first_bad_seq: 6 });
}

#[test]
fn truncation_below_the_attested_head_fails_attestation() {
    let l = run_ledger(50);
    let att = l.attest(KEY, SimTime::new(999, 0)).unwrap();
    let bytes = l.to_bytes();
    let (all, _) = read_entries(&bytes).unwrap();
    assert!(verify_attestation(KEY, &att, &all));
    for keep in 0..50 {
        assert!(!verify_attestation(KEY, &att, &all[..keep]), "kept {keep}");
    }
    // truncating the file at every byte offset
    for cut in 0..bytes.len() {
        let ok = match read_entries(&bytes[..cut]) {
            Ok((entries, None)) => verify_attestation(KEY, &att, &entries),
            _ => false,
        };
        assert!(!ok, "cut at {cut}");
    }
}

#[test]
fn attestation_rejects_wrong_key_and_edited_fields() {
    let l = run_ledger(20);
    let att = l.attest(KEY, SimTime::new(5, 0)).unwrap();
    let entries = l.entries();
    assert!(!verify_attestation(b"someone-else", &att, entries));
    let mut a = att.clone();
    a.head_seq = 18;
    a.head_hash = hex_of(&entries[18].entry_hash);
    assert!(!verify_attestation(KEY, &a, entries));
    let mut a = att.clone();
    a.issued_at = SimTime::new(6, 0);
    assert!(!verify_attestation(KEY, &a, entries));
    let mut a = att;
    a.mac = "zz".into();
    assert!(!verify_attestation(KEY, &a, entries));
}

fn hex_of(h: &[u8]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn appending_after_the_head_keeps_an_old_attestation_valid() {
    let mut l = run_ledger(10);
    let att = l.attest(KEY, SimTime::new(1, 0)).unwrap();
    l.append(SimTime::new(2, 0), "test.extra", b"{}".to_vec()).unwrap();
    assert!(verify_attestation(KEY, &att, l.entries()));
}
