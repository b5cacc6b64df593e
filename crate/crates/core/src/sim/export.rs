//! Event-log, timeline and memory-trace writers.

use std::collections::HashMap;
use std::io::Write;

use serde_json::{json, Value};

use super::{Phase, SimulationResult};

/// Columns: `time_ns,resource,event,subject`; events are `<name>_<start|end>`.
pub fn write_event_csv<W: Write>(result: &SimulationResult, sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["time_ns", "resource", "event", "subject"])?;
    for e in &result.timeline {
        let phase = match e.phase {
            Phase::Start => "start",
            Phase::End => "end",
        };
        w.write_record([
            e.time_ns.to_string(),
            e.resource.as_str().to_string(),
            format!("{}_{phase}", e.name),
            e.subject.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `time_ns,bytes`.
pub fn write_memory_csv<W: Write>(result: &SimulationResult, sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["time_ns", "bytes"])?;
    for (t, b) in &result.mem_trace {
        w.write_record([t.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Chrome trace-event JSON: one complete (`"ph": "X"`) event per activity,
/// one track per resource, microsecond timestamps.
pub fn chrome_trace(result: &SimulationResult) -> Value {
    let mut open: HashMap<(super::Resource, &str, usize), Vec<u64>> = HashMap::new();
    let mut events = Vec::new();
    for e in &result.timeline {
        let key = (e.resource, e.name.as_str(), e.subject);
        match e.phase {
            Phase::Start => open.entry(key).or_default().push(e.time_ns),
            Phase::End => {
                let start = open
                    .get_mut(&key)
                    .and_then(|v| v.pop())
                    .unwrap_or(e.time_ns);
                events.push(json!({
                    "name": format!("{} {}", e.name, e.subject),
                    "cat": e.name,
                    "ph": "X",
                    "ts": start as f64 / 1e3,
                    "dur": (e.time_ns - start) as f64 / 1e3,
                    "pid": 0,
                    "tid": e.resource.as_str(),
                }));
            }
        }
    }
    json!({ "traceEvents": events, "displayTimeUnit": "ms" })
}

pub fn write_chrome_trace<W: Write>(result: &SimulationResult, sink: W) -> serde_json::Result<()> {
    serde_json::to_writer(sink, &chrome_trace(result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Resource, SimEvent};

    fn result() -> SimulationResult {
        let ev = |t, phase, name: &str| SimEvent {
            time_ns: t,
            resource: Resource::Gpu,
            phase,
            name: name.into(),
            subject: 3,
        };
        SimulationResult {
            t_iter: 0.0,
            t_fwd: 0.0,
            t_bwd: 0.0,
            t_cpu_optim_span: 0.0,
            m_peak: 0.0,
            timeline: vec![ev(1000, Phase::Start, "fwd"), ev(3000, Phase::End, "fwd")],
            mem_trace: vec![(0, 5), (1000, 9)],
            link_util: vec![],
            initial_bytes: 5,
            final_bytes: 5,
            backward_gathers: 0,
        }
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        write_event_csv(&result(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "time_ns,resource,event,subject\n1000,gpu,fwd_start,3\n3000,gpu,fwd_end,3\n"
        );
        let mut buf = Vec::new();
        write_memory_csv(&result(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "time_ns,bytes\n0,5\n1000,9\n"
        );
    }

    #[test]
    fn chrome_spans() {
        let v = chrome_trace(&result());
        let e = &v["traceEvents"][0];
        assert_eq!(e["ph"], "X");
        assert_eq!(e["ts"], 1.0);
        assert_eq!(e["dur"], 2.0);
        assert_eq!(e["tid"], "gpu");
    }
}
