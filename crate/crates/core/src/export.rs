//! CSV/JSON output helpers shared by the library and the CLI.

use std::io::Write;

use crate::error::Result;
use crate::trajectory::{ControlPath, StatePath};

/// Full double precision (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Columns `t, particle, x_0.., v_0..`. The control at node `k < K` is the
/// right limit (interval start), at `K` the left limit.
pub fn write_trajectory_csv<W: Write>(
    out: W,
    times: &[f64],
    state: &StatePath,
    control: &ControlPath,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = state.nodes[0].nrows();
    let d = control.dim();
    let mut header = vec!["node_time".to_string(), "particle_id".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..d).map(|i| format!("v_{i}")));
    w.write_record(&header)?;
    for (k, t) in times.iter().enumerate() {
        let v = control.node(k);
        let x = &state.nodes[k];
        for i in 0..x.ncols() {
            let mut row = vec![fmt_f64(*t), i.to_string()];
            row.extend(x.column(i).iter().map(|a| fmt_f64(*a)));
            row.extend(v.column(i).iter().map(|a| fmt_f64(*a)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
