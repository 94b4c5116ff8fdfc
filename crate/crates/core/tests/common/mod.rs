#![allow(dead_code)]

use specdec::metrics::DecodeTrace;
use specdec::{Actor, EventKind, Millis, TokenId};

/// Replays one actor of an asynchronous-engine trace at a time and checks the frontier rules:
/// `p_v` advances by at least one token per verify step and never moves
/// back; `p_d` grows by one per draft token and drops only at a rollback,
/// which lands exactly on the verified frontier it was asked for.
pub fn check_frontiers<T: Millis>(trace: &DecodeTrace<T>, prompt_len: usize) -> Result<(), String> {
    trace.validate().map_err(|e| e.to_string())?;

    let mut p_v = prompt_len;
    let mut corrections = Vec::new();
    for e in trace.events.iter().filter(|e| e.actor == Actor::Verify) {
        match e.kind {
            EventKind::VerifyAccept | EventKind::VerifyCorrect => {
                if e.pos_from != p_v {
                    return Err(format!(
                        "verify step starts at {} but p_v is {p_v}",
                        e.pos_from
                    ));
                }
                if e.pos_to <= e.pos_from {
                    return Err(format!(
                        "verify step {}..{} made no progress",
                        e.pos_from, e.pos_to
                    ));
                }
                p_v = e.pos_to;
                if e.kind == EventKind::VerifyCorrect {
                    corrections.push(p_v);
                }
            }
            EventKind::Complete => {
                if e.pos_to != p_v {
                    return Err(format!("completion at {} but p_v is {p_v}", e.pos_to));
                }
            }
            k => return Err(format!("verify actor emitted {k:?}")),
        }
    }

    let mut p_d = prompt_len;
    let mut acked = Vec::new();
    for e in trace.events.iter().filter(|e| e.actor == Actor::Draft) {
        match e.kind {
            EventKind::DraftToken => {
                if (e.pos_from, e.pos_to) != (p_d, p_d + 1) {
                    return Err(format!(
                        "draft token {}..{} with p_d {p_d}",
                        e.pos_from, e.pos_to
                    ));
                }
                p_d += 1;
            }
            EventKind::Rollback => {
                let (target, abandoned) = (e.pos_from, e.pos_to);
                if abandoned != p_d || target > p_d {
                    return Err(format!(
                        "rollback to {target} from {abandoned} with p_d {p_d}"
                    ));
                }
                p_d = target;
                acked.push(target);
            }
            k => return Err(format!("draft actor emitted {k:?}")),
        }
    }
    // Every correction except possibly the final one is acknowledged, in order.
    if !corrections.starts_with(&acked) || corrections.len() - acked.len() > 1 {
        return Err(format!(
            "corrections {corrections:?} vs acknowledged {acked:?}"
        ));
    }
    Ok(())
}

/// Independent greedy reference for the hash-chain verify model.
pub fn reference_hash_chain(
    seed: u64,
    vocab: u32,
    eos: u32,
    sample_eos: bool,
    prompt: &[u32],
    max_new: usize,
) -> Vec<TokenId> {
    fn sm(x: u64) -> u64 {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = sm(seed);
    for &t in prompt {
        h = sm(h ^ u64::from(t));
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let next = if sample_eos {
            (h % u64::from(vocab)) as u32
        } else {
            let r = (h % u64::from(vocab - 1)) as u32;
            if r >= eos {
                r + 1
            } else {
                r
            }
        };
        out.push(TokenId(next));
        if sample_eos && next == eos {
            break;
        }
        h = sm(h ^ u64::from(next));
    }
    out
}
