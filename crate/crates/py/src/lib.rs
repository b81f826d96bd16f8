//! Python bindings: sensor maths, arm kinematics, the trade-off ranking and a
//! headless simulator handle.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use nurse::arm::{forward_kinematics as fk, ik_dls, DhTable, EndEffectorState, IkParams, JointState};
use nurse::careplan::{classify as classify_vitals, CarePlanConfig, DEFAULT_CAREPLAN};
use nurse::controller::Controller;
use nurse::report::RunReport;
use nurse::sensors::{
    detect_ac_period, heart_rate_from_period, spo2_from_frames, temperature_from_adc, OpticalConstants, PpgFrame,
    TemperatureMode, ThermistorConfig, VitalSigns,
};
use nurse::simworld::Scenario;
use nurse::telemetry::{decode_frame as decode, encode_frame, Frame};
use nurse::tradeoff::{enumerate_configs, load_catalog, load_weights, select_optimal};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn encode_line(f: &Frame) -> PyResult<String> {
    let mut bytes = encode_frame(f).map_err(err)?;
    bytes.pop();
    String::from_utf8(bytes).map_err(err)
}

/// Blood oxygen saturation in percent from one pair of red/IR readings.
#[pyfunction]
fn spo2(ac_red: f64, dc_red: f64, ac_ir: f64, dc_ir: f64) -> PyResult<f64> {
    let frame = PpgFrame { ac_red, dc_red, ac_ir, dc_ir };
    spo2_from_frames(&frame, &OpticalConstants::default()).map_err(err)
}

/// Heart rate in BPM from a sampled pulse waveform.
#[pyfunction]
fn heart_rate(signal: Vec<f64>, sample_rate: f64) -> PyResult<f64> {
    let period = detect_ac_period(&signal, sample_rate).map_err(err)?;
    heart_rate_from_period(period).map_err(err)
}

/// Fahrenheit from a thermistor divider voltage.
#[pyfunction]
#[pyo3(signature = (v_adc, corrected = true))]
fn temperature_f(v_adc: f64, corrected: bool) -> PyResult<f64> {
    let mode = if corrected {
        TemperatureMode::Corrected
    } else {
        TemperatureMode::Literal
    };
    temperature_from_adc(v_adc, &ThermistorConfig::default(), mode).map_err(err)
}

/// End-effector position for joint angles `q` (radians).
#[pyfunction]
fn forward_kinematics(q: [f64; 3]) -> PyResult<(f64, f64, f64)> {
    let (ee, _) = fk(&JointState::new(q), &DhTable::default()).map_err(err)?;
    Ok((ee.x, ee.y, ee.z))
}

/// Joint angles reaching `target`, starting the search from `q0`.
#[pyfunction]
#[pyo3(signature = (target, q0 = [0.1, 0.1, 0.1]))]
fn inverse_kinematics(target: (f64, f64, f64), q0: [f64; 3]) -> PyResult<[f64; 3]> {
    let target = EndEffectorState::new(target.0, target.1, target.2);
    let q = ik_dls(&target, &JointState::new(q0), &DhTable::default(), &IkParams::default()).map_err(err)?;
    Ok(q.q)
}

/// Health flags for one set of vitals under the built-in care plan.
#[pyfunction]
fn classify(heart_rate: f64, spo2: f64, temp_f: f64) -> PyResult<Vec<String>> {
    let plan = CarePlanConfig::parse(DEFAULT_CAREPLAN).map_err(err)?;
    let v = VitalSigns::new(heart_rate, spo2, temp_f, 0.0).map_err(err)?;
    Ok(classify_vitals(&v, &plan.thresholds)
        .flags
        .iter()
        .map(|f| f.name().to_string())
        .collect())
}

/// The `k` cheapest configurations as `(code, total)` pairs.
#[pyfunction]
#[pyo3(signature = (catalog, weights, k = 5))]
fn rank_configurations(catalog: &str, weights: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
    let catalog = load_catalog(Path::new(catalog)).map_err(err)?;
    let weights = load_weights(Path::new(weights)).map_err(err)?;
    let all = enumerate_configs(&catalog, &weights).map_err(err)?;
    Ok(select_optimal(&all, k).iter().map(|c| (c.code(), c.total)).collect())
}

/// Validates one telemetry line and returns its canonical encoding.
#[pyfunction]
fn decode_frame(line: &str) -> PyResult<String> {
    encode_line(&decode(line.as_bytes()).map_err(err)?)
}

/// Headless ward simulation.
#[pyclass(unsendable)]
struct Simulator {
    ctl: Controller,
    frames: Vec<Frame>,
}

#[pymethods]
impl Simulator {
    #[new]
    #[pyo3(signature = (seed = 42, scenario = None, careplan = None))]
    fn new(seed: u64, scenario: Option<&str>, careplan: Option<&str>) -> PyResult<Self> {
        let scenario = match scenario {
            Some(p) => Scenario::load(Path::new(p)).map_err(err)?,
            None => Scenario::default_ward(),
        };
        let careplan = match careplan {
            Some(p) => CarePlanConfig::load(Path::new(p)).map_err(err)?,
            None => CarePlanConfig::parse(DEFAULT_CAREPLAN).map_err(err)?,
        };
        let ctl = Controller::with_seed(scenario, careplan, seed).map_err(err)?;
        Ok(Simulator { ctl, frames: Vec::new() })
    }

    #[getter]
    fn now(&self) -> f64 {
        self.ctl.now()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.ctl.mode().state.name()
    }

    #[getter]
    fn battery(&self) -> f64 {
        self.ctl.world().battery.level
    }

    /// Queues one `cmd` line issued at sim time `issued_at`.
    fn submit(&mut self, line: &str, issued_at: f64) {
        self.ctl.submit_line(line.as_bytes(), issued_at);
    }

    fn step(&mut self) {
        self.ctl.step();
    }

    fn run_until(&mut self, t: f64) {
        self.ctl.run_until(t);
    }

    /// Flushes anything still batched.
    fn finish(&mut self) {
        self.ctl.finish();
    }

    /// Frames published since the last call, one JSON line each.
    fn take_frames(&mut self) -> PyResult<Vec<String>> {
        let new = self.ctl.take_frames();
        let lines = new.iter().map(encode_line).collect::<PyResult<Vec<_>>>()?;
        self.frames.extend(new);
        Ok(lines)
    }

    /// Summary of every frame taken so far, as JSON.
    fn report(&self) -> PyResult<String> {
        serde_json::to_string(&RunReport::from_frames(&self.frames)).map_err(err)
    }
}

#[pymodule]
#[pyo3(name = "robonurse")]
fn robonurse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spo2, m)?)?;
    m.add_function(wrap_pyfunction!(heart_rate, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_f, m)?)?;
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(rank_configurations, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_class::<Simulator>()?;
    Ok(())
}
