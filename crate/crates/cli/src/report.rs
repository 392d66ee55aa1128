//! Comparison tables across agents, laid out split-major like the usual
//! seen/unseen scene × instruction results table.

use ddn_core::eval::{MeanStd, MetricsTable, Split};

fn cell(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "-".to_string(), |m| format!("{:.1} ({:.1})", m.mean, m.sample_std))
}

fn metrics(t: &MetricsTable, s: Split) -> [Option<MeanStd>; 3] {
    t.get(s).map_or([None; 3], |m| [Some(m.nsr), Some(m.nspl), Some(m.ssr)])
}

/// `agent,split,metric,mean,sample_std`; agents in the given order.
pub fn table_csv(tables: &[MetricsTable]) -> String {
    let mut s = String::from("agent,split,metric,mean,sample_std\n");
    for t in tables {
        for m in &t.splits {
            for (name, v) in [("NSR", m.nsr), ("NSPL", m.nspl), ("SSR", m.ssr)] {
                s.push_str(&format!("{},{},{},{:.1},{:.1}\n", t.agent, m.split, name, v.mean, v.sample_std));
            }
        }
    }
    s
}

/// Aligned text: one row per agent, NSR/NSPL/SSR under each split.
pub fn table_text(tables: &[MetricsTable]) -> String {
    const HEAD: [(&str, Split); 4] = [
        ("Seen Scene / Seen Instr.", Split::Ss),
        ("Seen Scene / Unseen Instr.", Split::Su),
        ("Unseen Scene / Seen Instr.", Split::Us),
        ("Unseen Scene / Unseen Instr.", Split::Uu),
    ];
    let agent_w = tables.iter().map(|t| t.agent.len()).max().unwrap_or(0).max("Method".len());
    let col_w = 12;
    let group_w = 3 * col_w + 2;
    let mut out = String::new();
    out.push_str(&format!("{:agent_w$}", ""));
    for (h, _) in HEAD {
        out.push_str(&format!(" | {h:^group_w$}"));
    }
    out.push('\n');
    out.push_str(&format!("{:agent_w$}", "Method"));
    for _ in HEAD {
        out.push_str(&format!(" | {:>col_w$} {:>col_w$} {:>col_w$}", "NSR", "NSPL", "SSR"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(agent_w + 4 * (group_w + 3)));
    out.push('\n');
    for t in tables {
        out.push_str(&format!("{:agent_w$}", t.agent));
        for (_, s) in HEAD {
            let [a, b, c] = metrics(t, s);
            out.push_str(&format!(" | {:>col_w$} {:>col_w$} {:>col_w$}", cell(a), cell(b), cell(c)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddn_core::eval::aggregate;

    fn table(name: &str) -> MetricsTable {
        MetricsTable {
            agent: name.into(),
            splits: Split::ALL.iter().map(|s| aggregate(*s, vec![[10.0, 5.0, 2.5]], 4)).collect(),
        }
    }

    #[test]
    fn one_row_per_agent() {
        let txt = table_text(&[table("oracle"), table("random")]);
        assert_eq!(txt.lines().count(), 3 + 2);
        assert!(txt.contains("10.0 (0.0)"));
        let csv = table_csv(&[table("random")]);
        assert_eq!(csv.lines().count(), 1 + 12);
    }
}
