//! Offline advantage recomputation from a trajectory log: only the logged
//! probabilities are consulted, no policy is loaded. Groups are rebuilt by
//! `prompt_id` in order of first appearance, so replaying a training log
//! reproduces the training advantage table byte for byte.

use otb_core::baselines::{advantages_from_stats, BaselineKind, MemberStats};
use otb_core::rewards::TrajectoryLogRecord;
use otb_core::TokenId;

use crate::report::{fmt_f64, Csv};
use crate::HarnessError;

#[derive(Debug)]
pub struct ReplayOutput {
    pub csv: String,
    pub groups: usize,
    pub trajectories: usize,
}

/// One member's advantage rows, shared by the training path and the replay
/// path so both emit identical bytes.
pub fn push_advantage_rows(
    csv: &mut Csv,
    prompt_id: u64,
    member: usize,
    tokens: &[TokenId],
    stats: &MemberStats,
    advantages: &[f64],
) {
    let cum = stats.cumulative_w();
    for t in 0..stats.len() {
        csv.row(&[
            prompt_id.to_string(),
            member.to_string(),
            t.to_string(),
            tokens[t].to_string(),
            fmt_f64(stats.g[t]),
            fmt_f64(cum[t]),
            fmt_f64(advantages[t]),
        ]);
    }
}

pub fn advantage_csv_header() -> Csv {
    Csv::new(&[
        "prompt_id",
        "member",
        "step",
        "token",
        "reward_to_go",
        "energy_cum",
        "advantage",
    ])
}

pub fn replay_log(
    text: &str,
    kind: BaselineKind,
    tis_clip: f64,
) -> Result<ReplayOutput, HarnessError> {
    if kind == BaselineKind::ValueOracle {
        return Err(HarnessError::Config(
            "replay computes group statistics from the log alone; `value_oracle` needs a policy"
                .into(),
        ));
    }
    let mut order: Vec<u64> = Vec::new();
    let mut groups: Vec<(u64, Vec<TrajectoryLogRecord>)> = Vec::new();
    let mut trajectories = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryLogRecord = serde_json::from_str(line)
            .map_err(|e| HarnessError::Replay(format!("line {}: {e}", idx + 1)))?;
        if record.tokens.is_empty() {
            return Err(HarnessError::Replay(format!(
                "line {}: record has no tokens",
                idx + 1
            )));
        }
        trajectories += 1;
        match order.iter().position(|p| *p == record.prompt_id) {
            Some(pos) => groups[pos].1.push(record),
            None => {
                order.push(record.prompt_id);
                groups.push((record.prompt_id, vec![record]));
            }
        }
    }
    if groups.is_empty() {
        return Err(HarnessError::Replay("log contains no records".into()));
    }

    let mut csv = advantage_csv_header();
    for (prompt_id, records) in &groups {
        let stats: Vec<MemberStats> = records
            .iter()
            .map(MemberStats::from_record)
            .collect::<Result<_, _>>()
            .map_err(|e| HarnessError::Replay(format!("prompt {prompt_id}: {e}")))?;
        let table = advantages_from_stats(&stats, kind, false, tis_clip)
            .map_err(|e| HarnessError::Replay(format!("prompt {prompt_id}: {e}")))?;
        for (i, record) in records.iter().enumerate() {
            push_advantage_rows(
                &mut csv,
                *prompt_id,
                i,
                &record.tokens,
                &stats[i],
                &table.rows[i],
            );
        }
    }
    Ok(ReplayOutput {
        csv: csv.into_string(),
        groups: groups.len(),
        trajectories,
    })
}
