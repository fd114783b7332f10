//! Trajectory CSV and plot-data emission.
//!
//! The CSV carries the full state plus the derived load frequencies,
//! marginal costs, and active loads, with values printed at 18 significant
//! digits so a re-read reproduces them bit for bit. Plot-data files are
//! plain two-column text (time, value), one file per channel, so any
//! plotting tool can redraw the frequency-response and generated-power
//! panels; the dispatch optimum is emitted as its own piecewise-constant
//! channel for the dashed reference lines.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use olfc_core::control::ControllerFamily;
use olfc_core::sim::{equilibrium, Scenario, Trajectory};

use crate::schema::LoadedScenario;

/// Column labels for the trajectory CSV, derived from the bus ids.
pub fn csv_header(loaded: &LoadedScenario) -> Vec<String> {
    let units = &loaded.scenario.units;
    let mut cols = vec!["t".to_string()];
    for &(from, to) in loaded.scenario.model.topology().lines() {
        cols.push(format!("eta_{}_{}", bus_id(loaded, from), bus_id(loaded, to)));
    }
    for &b in &loaded.gen_bus_ids {
        cols.push(format!("omega_g_{b}"));
    }
    for &b in &loaded.load_bus_ids {
        cols.push(format!("omega_l_{b}"));
    }
    if loaded.scenario.control.family != ControllerFamily::OpenLoop {
        for &b in &loaded.gen_bus_ids {
            cols.push(format!("P_m_{b}"));
        }
        for (i, unit) in units.iter().enumerate() {
            if unit.is_second_order() {
                cols.push(format!("P_s_{}", loaded.gen_bus_ids[i]));
            }
        }
        for &b in &loaded.gen_bus_ids {
            cols.push(format!("theta_{b}"));
        }
        for &b in &loaded.gen_bus_ids {
            cols.push(format!("marginal_{b}"));
        }
    }
    if loaded.scenario.control.family == ControllerFamily::PrimalDual {
        for &(from, to) in loaded.scenario.model.topology().lines() {
            cols.push(format!("v_{}_{}", bus_id(loaded, from), bus_id(loaded, to)));
        }
        for bus in loaded.gen_bus_ids.iter().chain(&loaded.load_bus_ids) {
            cols.push(format!("lambda_{bus}"));
        }
    }
    for lc in &loaded.scenario.control.load_control {
        cols.push(format!("theta_l_{}", loaded.load_bus_ids[lc.load_index]));
    }
    for &b in &loaded.load_bus_ids {
        cols.push(format!("P_l_{b}"));
    }
    cols
}

fn bus_id(loaded: &LoadedScenario, internal: usize) -> u32 {
    let ng = loaded.gen_bus_ids.len();
    if internal < ng {
        loaded.gen_bus_ids[internal]
    } else {
        loaded.load_bus_ids[internal - ng]
    }
}

fn row_values(trajectory: &Trajectory, scenario: &Scenario, row: usize) -> Vec<f64> {
    let lay = &trajectory.layout;
    let mut vals = vec![trajectory.times[row]];
    vals.extend(trajectory.slice(row, lay.line_angle).iter());
    vals.extend(trajectory.slice(row, lay.gen_freq).iter());
    vals.extend(trajectory.load_freq(row, scenario).iter());
    if scenario.control.family != ControllerFamily::OpenLoop {
        vals.extend(trajectory.slice(row, lay.mech_power).iter());
        vals.extend(trajectory.slice(row, lay.steam_power).iter());
        vals.extend(trajectory.slice(row, lay.setpoint).iter());
        vals.extend(trajectory.marginals(row, &scenario.units));
    }
    if scenario.control.family == ControllerFamily::PrimalDual {
        vals.extend(trajectory.slice(row, lay.virtual_flow).iter());
        vals.extend(trajectory.slice(row, lay.multiplier).iter());
    }
    vals.extend(trajectory.slice(row, lay.load_setpoint).iter());
    vals.extend(trajectory.loads[row].iter());
    vals
}

/// Writes the trajectory CSV; returns the row count written.
pub fn write_trajectory_csv(
    path: &Path,
    trajectory: &Trajectory,
    loaded: &LoadedScenario,
) -> std::io::Result<usize> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = csv_header(loaded);
    writeln!(w, "{}", header.join(","))?;
    for row in 0..trajectory.rows() {
        let vals = row_values(trajectory, &loaded.scenario, row);
        debug_assert_eq!(vals.len(), header.len());
        let mut line = String::with_capacity(vals.len() * 26);
        for (i, v) in vals.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.17e}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(trajectory.rows())
}

/// Reads a trajectory CSV back into header and numeric rows.
pub fn read_trajectory_csv(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        rows.push(
            line.split(',')
                .map(|v| v.parse::<f64>().expect("numeric CSV field"))
                .collect(),
        );
    }
    Ok((header, rows))
}

/// Emits two-column plot data: frequency response per bus and generated
/// power per generator with the piecewise dispatch optimum as a separate
/// dashed-line channel. Returns the written paths.
pub fn write_plot_data(
    dir: &Path,
    trajectory: &Trajectory,
    loaded: &LoadedScenario,
) -> Result<Vec<PathBuf>, crate::runner::CliError> {
    std::fs::create_dir_all(dir)?;
    let scenario = &loaded.scenario;
    let mut paths = Vec::new();

    let channel = |name: String, series: Box<dyn Fn(usize) -> f64>| -> std::io::Result<PathBuf> {
        let path = dir.join(name);
        let mut w = BufWriter::new(std::fs::File::create(&path)?);
        for row in 0..trajectory.rows() {
            writeln!(w, "{} {:.10e}", trajectory.times[row], series(row))?;
        }
        w.flush()?;
        Ok(path)
    };

    for (i, &bus) in loaded.gen_bus_ids.iter().enumerate() {
        let t = trajectory.clone();
        let off = t.layout.gen_freq.offset + i;
        paths.push(channel(
            format!("frequency_gen_{bus}.dat"),
            Box::new(move |row| t.states[row][off]),
        )?);
    }
    for (i, &bus) in loaded.load_bus_ids.iter().enumerate() {
        let t = trajectory.clone();
        let s = scenario.clone();
        paths.push(channel(
            format!("frequency_load_{bus}.dat"),
            Box::new(move |row| t.load_freq(row, &s)[i]),
        )?);
    }
    if scenario.control.family != ControllerFamily::OpenLoop {
        for (i, &bus) in loaded.gen_bus_ids.iter().enumerate() {
            let t = trajectory.clone();
            let off = t.layout.mech_power.offset + i;
            paths.push(channel(
                format!("power_gen_{bus}.dat"),
                Box::new(move |row| t.states[row][off]),
            )?);
        }
    }
    // Dispatch optimum per generator, piecewise constant over the schedule.
    let mut optima = Vec::new();
    for (time, loads) in scenario.schedule.entries() {
        let eq = equilibrium(scenario, loads)?;
        optima.push((*time, eq.mech_power));
    }
    for (i, &bus) in loaded.gen_bus_ids.iter().enumerate() {
        let t = trajectory.clone();
        let optima = optima.clone();
        paths.push(channel(
            format!("power_optimum_gen_{bus}.dat"),
            Box::new(move |row| {
                let time = t.times[row];
                let mut value = optima[0].1[i];
                for (event, mech) in &optima {
                    if *event <= time + 1e-9 {
                        value = mech[i];
                    }
                }
                value
            }),
        )?);
    }
    Ok(paths)
}
