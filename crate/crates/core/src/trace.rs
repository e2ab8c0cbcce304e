//! Periodic snapshots of a run and the metrics derived from them.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Seconds since the start of the run.
    pub t: f64,
    /// Queue length in packets at each monitored port; the first is primary.
    pub port_q: Vec<f64>,
    /// Smallest primary queue length seen since the previous row.
    pub q_min: f64,
    /// Sum of the sending rates of active flows crossing the primary port.
    pub agg_rate: f64,
    pub flow_rates: Vec<f64>,
    /// Bytes transmitted by the primary port so far.
    pub tx_bytes: u64,
    /// Packets dropped at any switch port so far.
    pub drops: u64,
    /// `ΔA / Δq` against the previous row; `None` when `Δq = 0`.
    pub slope_k: Option<f64>,
}

impl TraceRow {
    pub fn q(&self) -> f64 {
        self.port_q[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub ports: Vec<String>,
    pub flows: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn new(ports: Vec<String>, flows: Vec<String>) -> Self {
        Trace {
            ports,
            flows,
            rows: Vec::new(),
        }
    }

    /// Appends a row, filling in its slope from the previous one.
    pub fn push(&mut self, mut row: TraceRow) {
        debug_assert_eq!(row.port_q.len(), self.ports.len());
        if let Some(prev) = self.rows.last() {
            debug_assert!(row.t > prev.t);
            let dq = row.q() - prev.q();
            row.slope_k = (dq != 0.0).then(|| (row.agg_rate - prev.agg_rate) / dq);
        } else {
            row.slope_k = None;
        }
        self.rows.push(row);
    }

    /// CSV with a header naming every column and its unit. Column order:
    /// time, primary queue, primary queue minimum, aggregate rate, bytes
    /// sent, drops, slope, one rate per flow, then the other ports' queues.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,q_pkts,q_min_pkts,agg_rate_bps,tx_bytes,drops,slope_k");
        for f in &self.flows {
            let _ = write!(out, ",rate_bps_{f}");
        }
        for p in self.ports.iter().skip(1) {
            let _ = write!(out, ",q_pkts_{}", p.replace("->", "_"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{:.9},{},{},{},{},{},",
                r.t,
                r.q(),
                r.q_min,
                r.agg_rate,
                r.tx_bytes,
                r.drops
            );
            if let Some(k) = r.slope_k {
                let _ = write!(out, "{k}");
            }
            for v in &r.flow_rates {
                let _ = write!(out, ",{v}");
            }
            for q in r.port_q.iter().skip(1) {
                let _ = write!(out, ",{q}");
            }
            out.push('\n');
        }
        out
    }
}

/// What the metrics are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSpec {
    pub q0: f64,
    pub band: f64,
    /// Rows before this time (s) are ignored.
    pub start: f64,
    pub capacity_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Time (s from the start of the run) after which the queue stays within
    /// the band; `None` if it never settles.
    pub response_time: Option<f64>,
    pub max_amplitude: f64,
    pub avg_q: f64,
    pub drain_count: u64,
    pub throughput_ratio: f64,
    pub drop_count: u64,
    pub band: f64,
    pub rows: usize,
}

impl MetricsReport {
    pub fn to_kv(&self) -> String {
        let resp = match self.response_time {
            Some(t) => format!("{t:.9}"),
            None => "inf".into(),
        };
        format!(
            "response_time_s={resp}\nmax_amplitude_pkts={}\navg_q_pkts={}\ndrain_count={}\nthroughput_ratio={}\ndrop_count={}\nband_pkts={}\nrows={}\n",
            self.max_amplitude, self.avg_q, self.drain_count, self.throughput_ratio, self.drop_count, self.band, self.rows
        )
    }

    pub fn converged(&self) -> bool {
        self.response_time.is_some()
    }
}

pub fn compute_metrics(trace: &Trace, spec: &MetricsSpec) -> Result<MetricsReport> {
    let rows: Vec<&TraceRow> = trace.rows.iter().filter(|r| r.t >= spec.start).collect();
    if rows.is_empty() {
        return Err(Error::Analysis("no trace rows in the measurement window".into()));
    }
    let dev = |r: &TraceRow| (r.q() - spec.q0).abs();

    let response_time = match rows.iter().rposition(|r| dev(r) > spec.band) {
        None => Some(rows[0].t),
        // Entering the band on the final interval leaves nothing to judge.
        Some(i) if i + 2 >= rows.len() => None,
        Some(i) => {
            let (a, b) = (rows[i], rows[i + 1]);
            let (da, db) = (dev(a), dev(b));
            Some(a.t + (b.t - a.t) * (da - spec.band) / (da - db))
        }
    };
    let settled: Vec<&TraceRow> = match response_time {
        Some(t) => rows.iter().copied().filter(|r| r.t >= t).collect(),
        None => rows.clone(),
    };
    let settled = if settled.is_empty() { rows.clone() } else { settled };

    let max_amplitude = settled.iter().map(|r| dev(r)).fold(0.0, f64::max);
    let avg_q = rows.iter().map(|r| r.q()).sum::<f64>() / rows.len() as f64;

    let mut drain_count = 0;
    let mut in_drain = false;
    for r in &settled {
        let empty = r.q_min <= 0.0;
        if empty && !in_drain {
            drain_count += 1;
        }
        in_drain = empty;
    }

    let (first, last) = (settled[0], settled[settled.len() - 1]);
    let span = last.t - first.t;
    let throughput_ratio = if span > 0.0 {
        ((last.tx_bytes - first.tx_bytes) as f64 * 8.0 / (spec.capacity_bps * span)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(MetricsReport {
        response_time,
        max_amplitude,
        avg_q,
        drain_count,
        throughput_ratio,
        drop_count: rows[rows.len() - 1].drops - rows[0].drops,
        band: spec.band,
        rows: rows.len(),
    })
}
