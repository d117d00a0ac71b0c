//! Controller firmware and camera handshake, simulated at the byte level.
//!
//! Wire grammar (one ASCII byte per opcode, band index as a raw byte):
//!
//! | bytes        | direction           | meaning                              |
//! |--------------|---------------------|--------------------------------------|
//! | `A`          | host → controller   | capture every band in order          |
//! | `S` `<band>` | host → controller   | capture one band (0-based index)     |
//! | `R`          | controller → camera | LEDs lit, ready for exposure         |
//! | `C`          | camera → controller | exposure started                     |
//! | `D`          | camera → controller | exposure finished                    |
//!
//! The firmware latches its eight potentiometer readings into the PWM
//! levels only when a host command is recognized in the waiting state;
//! the levels are frozen for the whole capture. Unknown or out-of-place
//! bytes are ignored. Timeouts are counted in simulation steps.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OP_CAPTURE_ALL: u8 = b'A';
pub const OP_CAPTURE_SINGLE: u8 = b'S';
pub const OP_READY: u8 = b'R';
pub const OP_CAPTURE: u8 = b'C';
pub const OP_DONE: u8 = b'D';

/// Four top-panel then four bottom-panel segment levels.
pub type PwmLevels = [u8; 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WireMessage {
    CaptureAll,
    CaptureSingle(u8),
    Ready,
    Capture,
    Done,
}

impl WireMessage {
    pub fn encode(self) -> Vec<u8> {
        match self {
            WireMessage::CaptureAll => vec![OP_CAPTURE_ALL],
            WireMessage::CaptureSingle(b) => vec![OP_CAPTURE_SINGLE, b],
            WireMessage::Ready => vec![OP_READY],
            WireMessage::Capture => vec![OP_CAPTURE],
            WireMessage::Done => vec![OP_DONE],
        }
    }

    /// Parses one message from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize)> {
        let bad = |why: &str| Error::param(format!("wire: {why}"));
        match bytes.first() {
            None => Err(bad("empty input")),
            Some(&OP_CAPTURE_ALL) => Ok((WireMessage::CaptureAll, 1)),
            Some(&OP_CAPTURE_SINGLE) => bytes
                .get(1)
                .map(|&b| (WireMessage::CaptureSingle(b), 2))
                .ok_or_else(|| bad("single-band command without a band byte")),
            Some(&OP_READY) => Ok((WireMessage::Ready, 1)),
            Some(&OP_CAPTURE) => Ok((WireMessage::Capture, 1)),
            Some(&OP_DONE) => Ok((WireMessage::Done, 1)),
            Some(b) => Err(bad(&format!("unknown opcode 0x{b:02x}"))),
        }
    }

    pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<WireMessage>> {
        let mut out = Vec::new();
        while !bytes.is_empty() {
            let (m, n) = WireMessage::decode(bytes)?;
            out.push(m);
            bytes = &bytes[n..];
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FirmwareState {
    Waiting,
    /// Index of the band currently lit.
    SequentialCapture(usize),
    SingleBand(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    Byte(u8),
    /// The controller gave up waiting for the camera.
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    LatchPwm(PwmLevels),
    LedOn(usize),
    LedOff(usize),
    SendReady,
    /// Byte that matched nothing in the current state.
    Ignored(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Firmware {
    pub state: FirmwareState,
    pub pwm: PwmLevels,
    pub n_bands: usize,
    /// First byte of a two-byte frame awaiting its band index.
    pending: Option<u8>,
}

impl Firmware {
    pub fn new(n_bands: usize) -> Firmware {
        assert!((1..=256).contains(&n_bands), "band index must fit one byte");
        Firmware {
            state: FirmwareState::Waiting,
            pwm: [0; 8],
            n_bands,
            pending: None,
        }
    }

    pub fn lit_band(&self) -> Option<usize> {
        match self.state {
            FirmwareState::Waiting => None,
            FirmwareState::SequentialCapture(b) | FirmwareState::SingleBand(b) => Some(b),
        }
    }
}

/// Pure transition function of the controller.
pub fn firmware_step(fw: &Firmware, input: Input, pots: PwmLevels) -> (Firmware, Vec<Action>) {
    let mut next = *fw;
    let mut actions = Vec::new();
    let start = |next: &mut Firmware, actions: &mut Vec<Action>, state: FirmwareState, band: usize| {
        next.pwm = pots;
        next.state = state;
        actions.push(Action::LatchPwm(pots));
        actions.push(Action::LedOn(band));
        actions.push(Action::SendReady);
    };
    match (fw.state, input) {
        (FirmwareState::Waiting, Input::Byte(b)) => match fw.pending {
            Some(OP_CAPTURE_SINGLE) => {
                next.pending = None;
                if (b as usize) < fw.n_bands {
                    start(
                        &mut next,
                        &mut actions,
                        FirmwareState::SingleBand(b as usize),
                        b as usize,
                    );
                } else {
                    actions.push(Action::Ignored(b));
                }
            }
            _ => match b {
                OP_CAPTURE_ALL => start(&mut next, &mut actions, FirmwareState::SequentialCapture(0), 0),
                OP_CAPTURE_SINGLE => next.pending = Some(b),
                _ => actions.push(Action::Ignored(b)),
            },
        },
        (FirmwareState::Waiting, Input::Timeout) => next.pending = None,
        (FirmwareState::SequentialCapture(i), Input::Byte(OP_DONE)) => {
            actions.push(Action::LedOff(i));
            if i + 1 < fw.n_bands {
                next.state = FirmwareState::SequentialCapture(i + 1);
                actions.push(Action::LedOn(i + 1));
                actions.push(Action::SendReady);
            } else {
                next.state = FirmwareState::Waiting;
            }
        }
        (FirmwareState::SingleBand(i), Input::Byte(OP_DONE)) => {
            actions.push(Action::LedOff(i));
            next.state = FirmwareState::Waiting;
        }
        (FirmwareState::SequentialCapture(i) | FirmwareState::SingleBand(i), Input::Timeout) => {
            actions.push(Action::LedOff(i));
            next.state = FirmwareState::Waiting;
        }
        (_, Input::Byte(b)) => actions.push(Action::Ignored(b)),
    }
    for a in &actions {
        if let Action::Ignored(b) = a {
            log::debug!("firmware ignored byte 0x{b:02x} in {:?}", fw.state);
        }
    }
    (next, actions)
}

/// Tracks LED actions and reports the first safety violation.
#[derive(Clone, Debug, Default)]
pub struct LedMonitor {
    lit: Option<usize>,
}

impl LedMonitor {
    pub fn observe(&mut self, action: &Action) -> std::result::Result<(), String> {
        match *action {
            Action::LedOn(b) => {
                if let Some(on) = self.lit {
                    return Err(format!("band {b} switched on while band {on} is lit"));
                }
                self.lit = Some(b);
            }
            Action::LedOff(b) => {
                if self.lit != Some(b) {
                    return Err(format!("band {b} switched off but lit is {:?}", self.lit));
                }
                self.lit = None;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn lit(&self) -> Option<usize> {
        self.lit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Host,
    Controller,
    Camera,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Host => "host",
            Party::Controller => "controller",
            Party::Camera => "camera",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    LedOn,
    Ready,
    Capture,
    Done,
    LedOff,
    Timeout,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::LedOn => "LED_ON",
            EventKind::Ready => "READY",
            EventKind::Capture => "CAPTURE",
            EventKind::Done => "DONE",
            EventKind::LedOff => "LED_OFF",
            EventKind::Timeout => "TIMEOUT",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub step: u64,
    pub party: Party,
    pub kind: EventKind,
    pub band: Option<usize>,
}

impl fmt::Display for TranscriptEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} {} {}", self.step, self.party, self.kind)?;
        if let Some(b) = self.band {
            write!(f, " {b}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript(pub Vec<TranscriptEvent>);

impl Transcript {
    /// One event per line, newline-terminated.
    pub fn render(&self) -> String {
        self.0.iter().map(|e| format!("{e}\n")).collect()
    }

    /// Checks that LED intervals never overlap, every LED_ON is closed, and
    /// every CAPTURE happens while some band is lit.
    pub fn check_safety(&self) -> std::result::Result<(), String> {
        let mut lit: Option<usize> = None;
        for e in &self.0 {
            match e.kind {
                EventKind::LedOn => {
                    if let Some(b) = lit {
                        return Err(format!("t={}: LED_ON while band {b} lit", e.step));
                    }
                    lit = e.band;
                }
                EventKind::LedOff => {
                    if lit != e.band {
                        return Err(format!("t={}: LED_OFF for a band that is not lit", e.step));
                    }
                    lit = None;
                }
                EventKind::Capture if lit.is_none() => {
                    return Err(format!("t={}: CAPTURE with LEDs off", e.step));
                }
                _ => {}
            }
        }
        match lit {
            Some(b) => Err(format!("band {b} left on")),
            None => Ok(()),
        }
    }
}

/// Behaviour of the simulated camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Starts an exposure when READY arrives.
    pub responds: bool,
    /// Reports DONE when the exposure ends.
    pub sends_done: bool,
    /// Idle steps between CAPTURE and DONE.
    pub exposure_steps: u64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            responds: true,
            sends_done: true,
            exposure_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub n_bands: usize,
    pub pots: PwmLevels,
    pub camera: CameraModel,
    /// Idle steps the controller tolerates while waiting for DONE.
    pub step_budget: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            n_bands: 14,
            pots: [200; 8],
            camera: CameraModel::default(),
            step_budget: 50,
        }
    }
}

/// Result of a simulated session: the transcript is kept on failure too.
#[derive(Debug)]
pub struct Session {
    pub transcript: Transcript,
    pub firmware: Firmware,
    pub outcome: Result<()>,
}

struct Msg {
    to: Party,
    bytes: Vec<u8>,
    deliver_at: u64,
}

/// Discrete-event loop: one logged event or one idle tick per step.
struct Sim {
    cfg: LinkConfig,
    t: u64,
    firmware: Firmware,
    queue: VecDeque<Msg>,
    events: Vec<TranscriptEvent>,
}

impl Sim {
    fn new(cfg: LinkConfig) -> Sim {
        Sim {
            cfg,
            t: 0,
            firmware: Firmware::new(cfg.n_bands),
            queue: VecDeque::new(),
            events: Vec::new(),
        }
    }

    fn log(&mut self, party: Party, kind: EventKind, band: Option<usize>) {
        self.t += 1;
        self.events.push(TranscriptEvent {
            step: self.t,
            party,
            kind,
            band,
        });
    }

    fn controller(&mut self, input: Input) {
        let (next, actions) = firmware_step(&self.firmware, input, self.cfg.pots);
        self.firmware = next;
        for a in actions {
            match a {
                Action::LedOn(b) => self.log(Party::Controller, EventKind::LedOn, Some(b)),
                Action::LedOff(b) => self.log(Party::Controller, EventKind::LedOff, Some(b)),
                Action::SendReady => {
                    self.log(Party::Controller, EventKind::Ready, None);
                    self.queue.push_back(Msg {
                        to: Party::Camera,
                        bytes: WireMessage::Ready.encode(),
                        deliver_at: self.t,
                    });
                }
                Action::LatchPwm(_) | Action::Ignored(_) => {}
            }
        }
    }

    fn camera(&mut self, msg: WireMessage) {
        if msg != WireMessage::Ready || !self.cfg.camera.responds {
            return;
        }
        self.log(Party::Camera, EventKind::Capture, None);
        self.queue.push_back(Msg {
            to: Party::Controller,
            bytes: WireMessage::Capture.encode(),
            deliver_at: self.t,
        });
        if self.cfg.camera.sends_done {
            self.queue.push_back(Msg {
                to: Party::Camera,
                bytes: WireMessage::Done.encode(),
                deliver_at: self.t + self.cfg.camera.exposure_steps,
            });
        }
    }

    /// Runs until the controller is idle and no messages are in flight.
    fn run(&mut self, host_bytes: &[u8]) -> Result<()> {
        self.queue.push_back(Msg {
            to: Party::Controller,
            bytes: host_bytes.to_vec(),
            deliver_at: 0,
        });
        let mut idle = 0u64;
        loop {
            let due = self.queue.iter().position(|m| m.deliver_at <= self.t);
            match due {
                Some(i) => {
                    idle = 0;
                    let msg = self.queue.remove(i).expect("index valid");
                    match msg.to {
                        Party::Controller => {
                            for &b in &msg.bytes {
                                self.controller(Input::Byte(b));
                            }
                        }
                        // a DONE addressed to the camera is its own
                        // exposure-end timer: forward it to the controller
                        Party::Camera if msg.bytes == [OP_DONE] => {
                            self.log(Party::Camera, EventKind::Done, None);
                            self.queue.push_back(Msg {
                                to: Party::Controller,
                                bytes: msg.bytes,
                                deliver_at: self.t,
                            });
                        }
                        Party::Camera => {
                            for m in WireMessage::decode_all(&msg.bytes)? {
                                self.camera(m);
                            }
                        }
                        Party::Host => {}
                    }
                }
                None if self.queue.is_empty() && self.firmware.state == FirmwareState::Waiting => return Ok(()),
                None => {
                    self.t += 1;
                    idle += 1;
                    if idle > self.cfg.step_budget && self.firmware.state != FirmwareState::Waiting {
                        let band = self.firmware.lit_band();
                        self.log(Party::Controller, EventKind::Timeout, band);
                        self.controller(Input::Timeout);
                        self.queue.clear();
                        return Err(Error::Timeout {
                            steps: self.t,
                            waiting_for: "DONE".into(),
                        });
                    }
                }
            }
        }
    }

    fn finish(self, outcome: Result<()>) -> Session {
        Session {
            transcript: Transcript(self.events),
            firmware: self.firmware,
            outcome,
        }
    }
}

/// One host single-band request and the resulting handshake.
pub fn capture_handshake(cfg: &LinkConfig, band: usize) -> Session {
    let mut sim = Sim::new(*cfg);
    if band >= cfg.n_bands {
        return sim.finish(Err(Error::param(format!("band {band} of {}", cfg.n_bands))));
    }
    let outcome = sim.run(&WireMessage::CaptureSingle(band as u8).encode());
    sim.finish(outcome)
}

/// Capture-all request: one handshake per band, in band order.
pub fn sequential_capture(cfg: &LinkConfig) -> Session {
    let mut sim = Sim::new(*cfg);
    let outcome = sim.run(&WireMessage::CaptureAll.encode());
    sim.finish(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOLDEN: &str = "t=1 controller LED_ON 3\n\
                          t=2 controller READY\n\
                          t=3 camera CAPTURE\n\
                          t=4 camera DONE\n\
                          t=5 controller LED_OFF 3\n";

    #[test]
    fn nominal_handshake_matches_golden() {
        let s = capture_handshake(&LinkConfig::default(), 3);
        s.outcome.unwrap();
        assert_eq!(s.transcript.render(), GOLDEN);
        assert_eq!(s.firmware.state, FirmwareState::Waiting);
        assert_eq!(s.firmware.pwm, [200; 8]);
    }

    #[test]
    fn missing_done_times_out_with_leds_off() {
        let cfg = LinkConfig {
            camera: CameraModel {
                sends_done: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = capture_handshake(&cfg, 2);
        assert!(matches!(s.outcome, Err(Error::Timeout { .. })));
        let last = s.transcript.0.last().unwrap();
        assert_eq!((last.kind, last.band), (EventKind::LedOff, Some(2)));
        s.transcript.check_safety().unwrap();
        assert_eq!(s.firmware.state, FirmwareState::Waiting);
    }

    #[test]
    fn slow_camera_within_budget() {
        let cfg = LinkConfig {
            camera: CameraModel {
                exposure_steps: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = capture_handshake(&cfg, 0);
        s.outcome.unwrap();
        s.transcript.check_safety().unwrap();
    }

    #[test]
    fn sequential_capture_interleaves() {
        let cfg = LinkConfig {
            n_bands: 5,
            ..Default::default()
        };
        let s = sequential_capture(&cfg);
        s.outcome.unwrap();
        s.transcript.check_safety().unwrap();
        let on: Vec<usize> = s
            .transcript
            .0
            .iter()
            .filter(|e| e.kind == EventKind::LedOn)
            .map(|e| e.band.unwrap())
            .collect();
        assert_eq!(on, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.transcript.0.len(), 25);
    }

    #[test]
    fn grammar_rules() {
        let fw = Firmware::new(4);
        let pots = [9, 8, 7, 6, 5, 4, 3, 2];
        let (a, acts) = firmware_step(&fw, Input::Byte(b'A'), pots);
        assert_eq!(a.state, FirmwareState::SequentialCapture(0));
        assert_eq!(a.pwm, pots);
        assert!(acts.contains(&Action::LedOn(0)));
        // pot changes mid-capture are not latched
        let (b, _) = firmware_step(&a, Input::Byte(b'C'), [0; 8]);
        assert_eq!((b.state, b.pwm), (a.state, a.pwm));
        let (c, _) = firmware_step(&a, Input::Byte(b'A'), [1; 8]);
        assert_eq!((c.state, c.pwm), (a.state, a.pwm));
        // single band completion turns the LEDs off
        let (s, _) = firmware_step(&fw, Input::Byte(b'S'), pots);
        let (s, _) = firmware_step(&s, Input::Byte(2), pots);
        assert_eq!(s.state, FirmwareState::SingleBand(2));
        let (w, acts) = firmware_step(&s, Input::Byte(b'D'), pots);
        assert_eq!(w.state, FirmwareState::Waiting);
        assert_eq!(acts, vec![Action::LedOff(2)]);
        // out-of-range band and junk are ignored
        let (s, _) = firmware_step(&fw, Input::Byte(b'S'), pots);
        let (s, _) = firmware_step(&s, Input::Byte(9), pots);
        assert_eq!(s.state, FirmwareState::Waiting);
        let (j, acts) = firmware_step(&fw, Input::Byte(0xff), pots);
        assert_eq!(j, fw);
        assert_eq!(acts, vec![Action::Ignored(0xff)]);
    }

    #[test]
    fn decode_errors() {
        assert!(WireMessage::decode(b"").is_err());
        assert!(WireMessage::decode(b"S").is_err());
        assert!(WireMessage::decode(b"Z").is_err());
    }

    fn message() -> impl Strategy<Value = WireMessage> {
        prop_oneof![
            Just(WireMessage::CaptureAll),
            any::<u8>().prop_map(WireMessage::CaptureSingle),
            Just(WireMessage::Ready),
            Just(WireMessage::Capture),
            Just(WireMessage::Done),
        ]
    }

    proptest! {
        #[test]
        fn wire_round_trip(msgs in proptest::collection::vec(message(), 0..20)) {
            let bytes: Vec<u8> = msgs.iter().flat_map(|m| m.encode()).collect();
            let decoded = WireMessage::decode_all(&bytes).unwrap();
            prop_assert_eq!(&decoded, &msgs);
            let again: Vec<u8> = decoded.iter().flat_map(|m| m.encode()).collect();
            prop_assert_eq!(again, bytes);
        }

        #[test]
        fn invalid_bytes_never_change_state(b in any::<u8>()) {
            prop_assume!(![OP_CAPTURE_ALL, OP_CAPTURE_SINGLE].contains(&b));
            let fw = Firmware::new(14);
            let (next, _) = firmware_step(&fw, Input::Byte(b), [3; 8]);
            prop_assert_eq!(next, fw);
        }
    }
}
