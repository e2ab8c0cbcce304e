//! Packet-level network simulation: paced sources, store-and-forward switch
//! ports with congestion points, and feedback delivered back to sources.

use std::collections::HashMap;

use crate::asm::{AsmParams, AsmRpState};
use crate::config::{parse_port, Algorithm, ScenarioSpec, Topology};
use crate::cp::{CongestionPoint, CpConfig, CpMode, Cpid, FeedbackFrame, HostAddr, Packet, SwitchPort, WIRE_LEN};
use crate::error::{Error, Result};
use crate::event::{Classify, EventHandle, EventKind, EventQueue, RngStream, SimSummary, SimTime};
use crate::qcn::{CycleSource, QcnParams, QcnRpState};
use crate::trace::{compute_metrics, MetricsReport, MetricsSpec, Trace, TraceRow};

/// Stream ids below this are reserved for scenario-level draws.
const CP_STREAM_BASE: u64 = 1_000;

#[derive(Debug, Clone)]
enum Ev {
    FlowStart(usize),
    FlowStop(usize),
    /// Source emits its next packet.
    Send(usize),
    Arrive { pkt: Packet },
    Depart(usize),
    Deliver { flow: usize, bytes: u32, from_port: usize },
    Feedback { flow: usize, wire: [u8; WIRE_LEN] },
    QcnTimer(usize),
    Sample,
}

impl Classify for Ev {
    fn kind(&self) -> EventKind {
        match self {
            Ev::FlowStart(_) => EventKind::FlowStart,
            Ev::FlowStop(_) => EventKind::FlowStop,
            Ev::Send(_) | Ev::Arrive { .. } | Ev::Deliver { .. } => EventKind::PacketArrival,
            Ev::Depart(_) => EventKind::PacketDeparture,
            Ev::Feedback { .. } => EventKind::FeedbackDelivery,
            Ev::QcnTimer(_) => EventKind::TimerExpiry,
            Ev::Sample => EventKind::TraceSample,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PortState {
    pub name: String,
    pub port: SwitchPort,
    pub delay: SimTime,
    pub in_flight_bytes: u64,
    pub is_switch: bool,
    min_q_bytes: u64,
}

#[derive(Debug, Clone)]
enum RateLimiter {
    Asm { state: AsmRpState, params: AsmParams },
    Qcn { state: QcnRpState, params: QcnParams },
}

impl RateLimiter {
    fn rate(&self) -> f64 {
        match self {
            RateLimiter::Asm { state, .. } => state.rate_bps,
            RateLimiter::Qcn { state, .. } => state.rate_bps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub name: String,
    pub src: HostAddr,
    /// Egress ports along the path; the first is the source NIC.
    pub ports: Vec<usize>,
    /// Delay for a frame from the CP at each hop back to the source.
    fb_delay: Vec<SimTime>,
    pub packet_size: u32,
    rl: RateLimiter,
    pub active: bool,
    send: Option<EventHandle>,
    last_send: Option<SimTime>,
    timer: Option<EventHandle>,
    pub sent_bytes: u64,
    pub delivered_bytes: u64,
    pub feedback_frames: u64,
    pub malformed_frames: u64,
}

impl FlowState {
    pub fn rate_bps(&self) -> f64 {
        self.rl.rate()
    }

    fn gap(&self) -> SimTime {
        SimTime::from_secs_f64(self.packet_size as f64 * 8.0 / self.rl.rate()).max(SimTime::from_nanos(1))
    }
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: MetricsReport,
    pub summary: SimSummary,
    pub ports: Vec<PortState>,
    pub flows: Vec<FlowState>,
    pub primary_port: usize,
}

impl RunOutput {
    pub fn port(&self, name: &str) -> Option<&PortState> {
        self.ports.iter().find(|p| p.name == name)
    }
}

pub struct Network {
    spec: ScenarioSpec,
    ports: Vec<PortState>,
    flows: Vec<FlowState>,
    monitor: Vec<usize>,
    primary_flows: Vec<usize>,
    trace: Trace,
    period: SimTime,
}

impl Network {
    pub fn new(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let topo = Topology::new(spec);
        let nodes: Vec<&str> = spec.hosts.iter().chain(&spec.switches).map(String::as_str).collect();
        let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let is_switch = |n: &str| spec.switches.iter().any(|s| s == n);

        let mut ports = Vec::new();
        let mut port_of: HashMap<(&str, &str), usize> = HashMap::new();
        for l in &spec.links {
            for (from, to) in [(l.a.as_str(), l.b.as_str()), (l.b.as_str(), l.a.as_str())] {
                let id = ports.len();
                let switch = is_switch(from);
                let cp = switch.then(|| {
                    let (mode, w, p, dedup) = match spec.algorithm {
                        Algorithm::Asm => (CpMode::Asm { scale: spec.asm_scale() }, spec.asm.w, spec.asm.p, spec.asm.dedup),
                        Algorithm::Qcn => (
                            CpMode::Qcn {
                                scale: spec.qcn_scale(),
                                max_code: spec.qcn.fb_max_code,
                            },
                            spec.qcn.w,
                            spec.qcn.p,
                            spec.qcn.dedup,
                        ),
                    };
                    CongestionPoint::new(
                        Cpid(id as u32),
                        CpConfig {
                            mode,
                            q0_packets: spec.q0_packets,
                            w,
                            p,
                            packet_size: spec.packet_size_bytes,
                            dedup,
                            dedup_window: spec.asm.dedup_window_ns.map(SimTime::from_nanos),
                        },
                        RngStream::derive(spec.seed, CP_STREAM_BASE + id as u64),
                    )
                });
                let buffer = if switch { spec.buffer_bytes } else { u64::MAX };
                ports.push(PortState {
                    name: format!("{from}->{to}"),
                    port: SwitchPort::new(l.capacity_bps, buffer, cp),
                    delay: SimTime::from_nanos(l.delay_ns),
                    in_flight_bytes: 0,
                    is_switch: switch,
                    min_q_bytes: 0,
                });
                port_of.insert((from, to), id);
            }
        }

        let mut flows = Vec::new();
        for (i, f) in spec.flows.iter().enumerate() {
            let path = topo
                .route(&f.src, &f.dst)
                .ok_or_else(|| Error::Validation(format!("flow {i}: no route")))?;
            let hops: Vec<usize> = path.windows(2).map(|w| port_of[&(w[0], w[1])]).collect();
            let mut fb_delay = Vec::with_capacity(hops.len());
            let mut acc = SimTime::ZERO;
            for &p in &hops {
                fb_delay.push(acc);
                acc = acc + ports[p].delay;
            }
            let nic = ports[hops[0]].port.capacity_bps;
            let rl = match spec.algorithm {
                Algorithm::Asm => RateLimiter::Asm {
                    state: AsmRpState::new(f.initial_rate_bps, nic, spec.asm.r_min_bps),
                    params: spec.asm_params(nic)?,
                },
                Algorithm::Qcn => RateLimiter::Qcn {
                    state: QcnRpState::new(f.initial_rate_bps, nic),
                    params: spec.qcn_params(nic),
                },
            };
            flows.push(FlowState {
                name: format!("f{i}"),
                src: HostAddr(index[f.src.as_str()] as u32),
                ports: hops,
                fb_delay,
                packet_size: spec.packet_size(i),
                rl,
                active: false,
                send: None,
                last_send: None,
                timer: None,
                sent_bytes: 0,
                delivered_bytes: 0,
                feedback_frames: 0,
                malformed_frames: 0,
            });
        }

        let monitor: Vec<usize> = if spec.trace.monitor.is_empty() {
            let (a, b) = topo
                .busiest_port(spec)
                .ok_or_else(|| Error::Validation("no switch port carries traffic".into()))?;
            vec![port_of[&(a, b)]]
        } else {
            spec.trace
                .monitor
                .iter()
                .map(|m| parse_port(m).map(|(a, b)| port_of[&(a, b)]))
                .collect::<Result<_>>()?
        };
        let primary_flows = (0..flows.len()).filter(|&f| flows[f].ports.contains(&monitor[0])).collect();
        let trace = Trace::new(
            monitor.iter().map(|&p| ports[p].name.clone()).collect(),
            flows.iter().map(|f| f.name.clone()).collect(),
        );
        Ok(Network {
            period: spec.trace_period(),
            spec: spec.clone(),
            ports,
            flows,
            monitor,
            primary_flows,
            trace,
        })
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let mut queue: EventQueue<Ev> = EventQueue::new();
        for (i, (start, stop)) in self.spec.flow_times().into_iter().enumerate() {
            queue.schedule(start, Ev::FlowStart(i))?;
            if let Some(stop) = stop {
                queue.schedule(stop, Ev::FlowStop(i))?;
            }
        }
        queue.schedule(SimTime::ZERO, Ev::Sample)?;
        let end = self.spec.duration();
        log::info!("{}: simulating {} flows for {}", self.spec.name, self.flows.len(), end);
        let summary = queue.run_until(end, |q, ev| self.handle(q, ev.payload))?;
        log::info!(
            "{}: {} events in {:.3} s",
            self.spec.name,
            summary.dispatched,
            summary.wall_time.as_secs_f64()
        );

        let primary = self.monitor[0];
        let metrics = compute_metrics(
            &self.trace,
            &MetricsSpec {
                q0: self.spec.q0_packets,
                band: self.spec.band_packets(),
                start: SimTime::from_nanos(self.spec.trace.warmup_ns).as_secs_f64(),
                capacity_bps: self.ports[primary].port.capacity_bps,
            },
        )?;
        Ok(RunOutput {
            trace: self.trace,
            metrics,
            summary,
            ports: self.ports,
            flows: self.flows,
            primary_port: primary,
        })
    }

    fn handle(&mut self, q: &mut EventQueue<Ev>, ev: Ev) -> Result<()> {
        let now = q.now();
        match ev {
            Ev::FlowStart(f) => {
                self.flows[f].active = true;
                self.flows[f].send = Some(q.schedule(now, Ev::Send(f))?);
            }
            Ev::FlowStop(f) => {
                let flow = &mut self.flows[f];
                flow.active = false;
                for h in [flow.send.take(), flow.timer.take()].into_iter().flatten() {
                    q.cancel(h);
                }
            }
            Ev::Send(f) => self.send(q, f)?,
            Ev::Arrive { pkt } => {
                let from = self.flows[pkt.flow].ports[pkt.hop - 1];
                self.ports[from].in_flight_bytes -= pkt.size_bytes as u64;
                self.arrive(q, pkt)?;
            }
            Ev::Depart(p) => self.depart(q, p)?,
            Ev::Deliver { flow, bytes, from_port } => {
                self.ports[from_port].in_flight_bytes -= bytes as u64;
                self.flows[flow].delivered_bytes += bytes as u64;
            }
            Ev::Feedback { flow, wire } => self.feedback(q, flow, &wire)?,
            Ev::QcnTimer(f) => {
                let flow = &mut self.flows[f];
                flow.timer = None;
                if !flow.active {
                    return Ok(());
                }
                if let RateLimiter::Qcn { state, params } = &mut flow.rl {
                    state.cycle_complete(CycleSource::Timer, params);
                    let period = params.timer_period;
                    flow.timer = Some(q.schedule(now + period, Ev::QcnTimer(f))?);
                }
                self.reschedule_send(q, f)?;
            }
            Ev::Sample => {
                self.sample(now);
                let next = now + self.period;
                if next <= self.spec.duration() {
                    q.schedule(next, Ev::Sample)?;
                }
            }
        }
        Ok(())
    }

    fn send(&mut self, q: &mut EventQueue<Ev>, f: usize) -> Result<()> {
        let now = q.now();
        let flow = &mut self.flows[f];
        flow.send = None;
        if !flow.active {
            return Ok(());
        }
        let pkt = Packet {
            flow: f,
            src: flow.src,
            size_bytes: flow.packet_size,
            hop: 0,
        };
        flow.sent_bytes += pkt.size_bytes as u64;
        flow.last_send = Some(now);
        if let RateLimiter::Qcn { state, params } = &mut flow.rl {
            state.on_bytes_sent(pkt.size_bytes as u64, params);
        }
        let gap = flow.gap();
        flow.send = Some(q.schedule(now + gap, Ev::Send(f))?);
        self.arrive(q, pkt)
    }

    fn arrive(&mut self, q: &mut EventQueue<Ev>, pkt: Packet) -> Result<()> {
        let now = q.now();
        let p = self.flows[pkt.flow].ports[pkt.hop];
        let port = &mut self.ports[p];
        let q_before = port.port.q_bytes();
        if let Some(cp) = port.port.cp.as_mut() {
            if let Some(frame) = cp.maybe_sample(&pkt, q_before, now) {
                let delay = self.flows[pkt.flow].fb_delay[pkt.hop];
                q.schedule(
                    now + delay,
                    Ev::Feedback {
                        flow: pkt.flow,
                        wire: frame.encode(),
                    },
                )?;
            }
        }
        port.port.enqueue(pkt);
        if let Some(size) = port.port.start_transmission(now) {
            let tx = port.port.tx_time(size);
            q.schedule(now + tx, Ev::Depart(p))?;
        }
        Ok(())
    }

    fn depart(&mut self, q: &mut EventQueue<Ev>, p: usize) -> Result<()> {
        let now = q.now();
        let port = &mut self.ports[p];
        let mut pkt = port.port.finish_transmission(now);
        port.min_q_bytes = port.min_q_bytes.min(port.port.q_bytes());
        port.in_flight_bytes += pkt.size_bytes as u64;
        let arrive_at = now + port.delay;
        if let Some(size) = port.port.start_transmission(now) {
            let tx = port.port.tx_time(size);
            q.schedule(now + tx, Ev::Depart(p))?;
        }
        let flow = &self.flows[pkt.flow];
        if pkt.hop + 1 < flow.ports.len() {
            pkt.hop += 1;
            q.schedule(arrive_at, Ev::Arrive { pkt })?;
        } else {
            q.schedule(
                arrive_at,
                Ev::Deliver {
                    flow: pkt.flow,
                    bytes: pkt.size_bytes,
                    from_port: p,
                },
            )?;
        }
        Ok(())
    }

    fn feedback(&mut self, q: &mut EventQueue<Ev>, f: usize, wire: &[u8]) -> Result<()> {
        let now = q.now();
        let flow = &mut self.flows[f];
        if !flow.active {
            return Ok(());
        }
        let frame = match FeedbackFrame::decode(wire) {
            Ok(fr) if fr.dst == flow.src => fr,
            _ => {
                flow.malformed_frames += 1;
                return Ok(());
            }
        };
        flow.feedback_frames += 1;
        let before = flow.rl.rate();
        match &mut flow.rl {
            RateLimiter::Asm { state, params } => {
                state.on_feedback(&frame, params);
            }
            RateLimiter::Qcn { state, params } => {
                if state.on_feedback(&frame, params) {
                    if let Some(h) = flow.timer.take() {
                        q.cancel(h);
                    }
                    let period = params.timer_period;
                    flow.timer = Some(q.schedule(now + period, Ev::QcnTimer(f))?);
                }
            }
        }
        if flow.rl.rate() != before {
            self.reschedule_send(q, f)?;
        }
        Ok(())
    }

    /// Moves the pending send to honour the current rate, measured from the
    /// previous transmission.
    fn reschedule_send(&mut self, q: &mut EventQueue<Ev>, f: usize) -> Result<()> {
        let now = q.now();
        let flow = &mut self.flows[f];
        if !flow.active {
            return Ok(());
        }
        let Some(h) = flow.send.take() else {
            return Ok(());
        };
        q.cancel(h);
        let at = match flow.last_send {
            Some(last) => (last + flow.gap()).max(now),
            None => now,
        };
        flow.send = Some(q.schedule(at, Ev::Send(f))?);
        Ok(())
    }

    fn sample(&mut self, now: SimTime) {
        let size = self.spec.packet_size_bytes;
        let primary = self.monitor[0];
        let port_q = self.monitor.iter().map(|&p| self.ports[p].port.q_packets(size)).collect();
        let q_min = self.ports[primary].min_q_bytes as f64 / size as f64;
        for &p in &self.monitor {
            let port = &mut self.ports[p];
            port.min_q_bytes = port.port.q_bytes();
        }
        let rate = |f: &FlowState| if f.active { f.rate_bps() } else { 0.0 };
        let agg_rate = self.primary_flows.iter().map(|&f| rate(&self.flows[f])).sum();
        let drops = self.ports.iter().filter(|p| p.is_switch).map(|p| p.port.drops).sum();
        self.trace.push(TraceRow {
            t: now.as_secs_f64(),
            port_q,
            q_min,
            agg_rate,
            flow_rates: self.flows.iter().map(rate).collect(),
            tx_bytes: self.ports[primary].port.departed_bytes,
            drops,
            slope_k: None,
        });
    }
}

/// Builds and runs a scenario.
pub fn simulate(spec: &ScenarioSpec) -> Result<RunOutput> {
    Network::new(spec)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::build_dumbbell;

    fn quiet(mut s: ScenarioSpec) -> ScenarioSpec {
        s.duration_ns = 5_000_000;
        s
    }

    #[test]
    fn idle_network_samples_zero() {
        let mut s = quiet(build_dumbbell(1, 1e9, 2000));
        s.flows[0].start_ns = 10_000_000;
        let out = simulate(&s).unwrap();
        assert!(out.trace.rows.iter().all(|r| r.q() == 0.0 && r.agg_rate == 0.0));
        assert_eq!(out.trace.rows.len(), 51);
    }

    #[test]
    fn single_uncongested_flow_keeps_its_rate() {
        let mut s = quiet(build_dumbbell(1, 1e9, 2000));
        s.asm.dedup = false;
        let out = simulate(&s).unwrap();
        let last = out.trace.rows.last().unwrap();
        // Below target the ASM source speeds up, so the rate only grows.
        assert!(last.flow_rates[0] >= 5e8);
        assert!(out.trace.rows.iter().all(|r| r.q() <= 2.0));
    }

    #[test]
    fn overload_shows_in_aggregate_rate() {
        let s = quiet(build_dumbbell(3, 1e9, 2000));
        let out = simulate(&s).unwrap();
        assert_eq!(out.trace.rows[0].agg_rate, 1.5e9);
    }

    #[test]
    fn bytes_are_conserved() {
        let mut s = build_dumbbell(3, 1e9, 2000);
        s.duration_ns = 20_000_000;
        let out = simulate(&s).unwrap();
        let port = &out.ports[out.primary_port];
        let delivered: u64 = out.flows.iter().map(|f| f.delivered_bytes).sum();
        assert_eq!(port.port.departed_bytes, delivered + port.in_flight_bytes);
        assert_eq!(out.trace.rows.last().unwrap().tx_bytes, port.port.departed_bytes);
        for f in &out.flows {
            assert!(f.delivered_bytes <= f.sent_bytes);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let s = quiet(build_dumbbell(3, 1e9, 2000));
        let a = simulate(&s).unwrap();
        let b = simulate(&s).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert!(a.summary.same_outcome(&b.summary));
        let mut s2 = s.clone();
        s2.seed = 2;
        assert_ne!(simulate(&s2).unwrap().trace.to_csv(), a.trace.to_csv());
    }

    #[test]
    fn qcn_reacts_to_congestion() {
        let mut s = quiet(build_dumbbell(3, 1e9, 2000));
        s.algorithm = Algorithm::Qcn;
        s.duration_ns = 50_000_000;
        let out = simulate(&s).unwrap();
        assert!(out.flows.iter().any(|f| f.feedback_frames > 0));
        assert!(out.trace.rows.last().unwrap().agg_rate < 1.5e9);
    }
}
