use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detect::{Detector, FrameInput};
use crate::model::{counts_from_labels, OperationalMode};
use crate::simtank::{FocusBand, TankState};

use super::{Ack, AckStatus, CommandMessage, PowerState, TelemetryMessage, UnitState, Verb};

/// A simulated camera unit: captures from a shared tank on its own schedule,
/// runs the detector bound to its current mode and reports counts.
pub struct CameraUnit {
    state: UnitState,
    surface: Arc<dyn Detector>,
    subsurface: Arc<dyn Detector>,
    focus: FocusBand,
    rng: ChaCha8Rng,
    next_frame_id: u64,
    next_capture: f64,
    reboot_until: Option<f64>,
    debug_detections: bool,
}

impl CameraUnit {
    pub fn new(state: UnitState, surface: Arc<dyn Detector>, subsurface: Arc<dyn Detector>, seed: u64) -> Self {
        CameraUnit {
            state,
            surface,
            subsurface,
            focus: FocusBand::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_frame_id: 0,
            next_capture: 0.0,
            reboot_until: None,
            debug_detections: false,
        }
    }

    pub fn with_focus(mut self, focus: FocusBand) -> Self {
        self.focus = focus;
        self
    }

    /// Attach full detections to every telemetry message.
    pub fn with_debug_detections(mut self, on: bool) -> Self {
        self.debug_detections = on;
        self
    }

    pub fn state(&self) -> &UnitState {
        &self.state
    }

    pub fn unit_id(&self) -> &str {
        &self.state.unit_id
    }

    /// Time of the next capture, or `None` while powered off.
    pub fn next_due(&self) -> Option<f64> {
        match self.state.power {
            PowerState::Off => None,
            PowerState::On => Some(self.next_capture),
            PowerState::Rebooting => Some(self.next_capture.max(self.reboot_until.unwrap_or(0.0))),
        }
    }

    fn settle_power(&mut self, now: f64) {
        if self.state.power == PowerState::Rebooting && self.reboot_until.is_some_and(|t| now >= t) {
            self.state.power = PowerState::On;
            self.reboot_until = None;
        }
    }

    /// Captures one frame if a capture is due at the tank's current time.
    pub fn capture(&mut self, tank: &TankState) -> Option<TelemetryMessage> {
        let now = tank.time();
        self.settle_power(now);
        if self.state.power != PowerState::On || now < self.next_capture {
            return None;
        }
        let frame_id = self.next_frame_id;
        self.next_frame_id += 1;
        let scheduled = self.next_capture;
        self.next_capture = scheduled + self.state.capture_interval_s;
        if self.next_capture <= now {
            self.next_capture = now + self.state.capture_interval_s;
        }
        self.state.last_frame_time = Some(now);

        let truth = tank.capture_frame(frame_id, self.focus, &mut self.rng);
        let detector = match self.state.mode {
            OperationalMode::Surface => &self.surface,
            OperationalMode::SubSurface => &self.subsurface,
        };
        let mut msg = TelemetryMessage {
            unit_id: self.state.unit_id.clone(),
            frame_id,
            timestamp: now,
            mode: self.state.mode,
            counts: None,
            in_focus_count: None,
            detections: None,
            inference_time: 0.0,
            error: None,
        };
        let result = detector.detect(FrameInput {
            truth: &truth,
            image: None,
        });
        match result {
            Ok(r) => {
                msg.inference_time = r.inference_time;
                match self.state.mode {
                    OperationalMode::Surface => match counts_from_labels(r.detections.iter().map(|d| d.label)) {
                        Ok(c) => msg.counts = Some(c),
                        Err(e) => msg.error = Some(e.to_string()),
                    },
                    OperationalMode::SubSurface => msg.in_focus_count = Some(r.detections.len() as u64),
                }
                if self.debug_detections && msg.error.is_none() {
                    msg.detections = Some(r.detections);
                }
            }
            Err(e) => msg.error = Some(e.to_string()),
        }
        Some(msg)
    }

    pub fn handle(&mut self, cmd: &CommandMessage, now: f64) -> Ack {
        self.settle_power(now);
        let reject = |reason: String, state: &UnitState| Ack {
            command_id: cmd.command_id,
            unit_id: state.unit_id.clone(),
            status: AckStatus::Rejected,
            reason: Some(reason),
            state: Some(state.clone()),
        };
        match cmd.verb {
            Verb::SetMode { mode } => {
                if !self.state.mode.can_transition_to(mode) {
                    return reject(
                        format!(
                            "illegal mode transition {} -> {}",
                            self.state.mode.as_str(),
                            mode.as_str()
                        ),
                        &self.state,
                    );
                }
                self.state.mode = mode;
            }
            Verb::SetInterval { seconds } => {
                if !(seconds.is_finite() && seconds >= 1.0) {
                    return reject(format!("capture interval {seconds} s is below 1 s"), &self.state);
                }
                self.state.capture_interval_s = seconds;
                self.next_capture = self.state.last_frame_time.map_or(now, |t| t + seconds).max(now);
            }
            Verb::PowerCycle { downtime_s } => {
                if !(downtime_s.is_finite() && downtime_s >= 0.0) {
                    return reject(format!("downtime {downtime_s} s is invalid"), &self.state);
                }
                self.state.power = PowerState::Rebooting;
                self.reboot_until = Some(now + downtime_s);
            }
            Verb::Ping => {}
        }
        Ack {
            command_id: cmd.command_id,
            unit_id: self.state.unit_id.clone(),
            status: AckStatus::Ok,
            reason: None,
            state: Some(self.state.clone()),
        }
    }

    /// Powers the unit off (no frames until a power cycle).
    pub fn power_off(&mut self) {
        self.state.power = PowerState::Off;
    }
}
