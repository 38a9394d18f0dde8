use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use serde_json::{json, Value};
use wireleg::scenario::{build_session, bundled};
use wireleg::teleop::{serve_teleop, ServeOptions, TeleopServer};

const RATE: f64 = 200.0;

fn start(scenario: &str) -> TeleopServer {
    let script = bundled(scenario).unwrap();
    let config = script.resolve_config(&[]).unwrap();
    assert_eq!(config.control.control_rate, RATE);
    let session = build_session(&script, config).unwrap();
    serve_teleop(
        session,
        ServeOptions {
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            real_time_factor: 1.0,
            state_rate: RATE,
            scenario: scenario.into(),
        },
    )
    .unwrap()
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(server: &TeleopServer) -> Self {
        let stream = TcpStream::connect(server.local_addr()).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .unwrap();
        Self {
            writer: stream.try_clone().unwrap(),
            reader: BufReader::new(stream),
        }
    }

    fn next(&mut self) -> Value {
        let mut line = String::new();
        self.reader
            .read_line(&mut line)
            .expect("frame before timeout");
        assert!(line.ends_with('\n'), "truncated frame {line:?}");
        serde_json::from_str(&line).unwrap()
    }

    fn next_of(&mut self, kind: &str) -> Value {
        loop {
            let f = self.next();
            if f["type"] == kind {
                return f;
            }
        }
    }

    fn send(&mut self, v: &Value) {
        self.send_raw(&v.to_string());
    }

    fn send_raw(&mut self, s: &str) {
        self.writer.write_all(s.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }
}

fn z(frame: &Value) -> f64 {
    frame["pose"]["position"][2].as_f64().unwrap()
}

#[test]
fn hello_describes_the_scene() {
    let server = start("hover");
    let mut c = Client::connect(&server);
    let hello = c.next();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["protocol"], "wireleg-teleop v1");
    assert_eq!(hello["anchors"].as_array().unwrap().len(), 4);
    let state = c.next_of("state");
    assert_eq!(state["mode"]["wire_mode"], "CogVelocity");
    let wires = state["wires"].as_array().unwrap();
    assert_eq!(wires.iter().filter(|w| w["attached"] == true).count(), 4);
    server.shutdown();
    assert!(server.join().is_none());
}

#[test]
fn velocity_pulse_moves_pose_within_two_ticks() {
    let server = start("hover");
    let mut c = Client::connect(&server);
    let mut before = Vec::new();
    while before.len() < 20 {
        before.push(c.next_of("state"));
    }
    let jitter = before
        .windows(2)
        .map(|w| (z(&w[1]) - z(&w[0])).abs())
        .fold(0.0, f64::max);
    let base = z(before.last().unwrap());
    c.send(&json!({"type": "set_velocity", "linear": [0.0, 0.0, 0.1]}));
    let applied = loop {
        let f = c.next_of("state");
        if f["commands_applied"].as_u64() == Some(1) {
            break f;
        }
    };
    let t_cmd = applied["last_command_time"].as_f64().unwrap();
    let deadline = t_cmd + 2.0 / RATE + 1e-9;
    let mut frame = applied;
    let mut moved = false;
    while frame["time"].as_f64().unwrap() <= deadline {
        if z(&frame) - base > 10.0 * jitter.max(1e-9) {
            moved = true;
            break;
        }
        frame = c.next_of("state");
    }
    assert!(
        moved,
        "no upward motion by t={deadline} (jitter {jitter:e})"
    );
    c.send(&json!({"type": "set_velocity", "linear": [0.0, 0.0, 0.0]}));
    server.shutdown();
    server.join();
}

#[test]
fn malformed_lines_get_error_frames() {
    let server = start("hover");
    let mut c = Client::connect(&server);
    c.send_raw("{not json");
    let e = c.next_of("error");
    assert!(e["message"].as_str().unwrap().contains("malformed"));
    c.send(&json!({"type": "detach_wire", "wire": 1}));
    let e = c.next_of("error");
    assert!(e["message"].as_str().unwrap().contains("detach_wire"));
    // The connection survives both.
    assert_eq!(c.next_of("state")["commands_applied"], 0);
    server.shutdown();
    server.join();
}

#[test]
fn transitions_report_their_outcome() {
    let server = start("hover");
    let mut c = Client::connect(&server);
    c.send(&json!({"type": "transition", "wire_mode": "WireVelocity"}));
    let r = c.next_of("transition_result");
    assert_eq!(r["ok"], false);
    assert_eq!(r["mode"]["wire_mode"], "CogVelocity");
    assert!(r["reason"].is_string());
    c.send(&json!({"type": "transition", "leg_mode": "ToolUtilization"}));
    let r = c.next_of("transition_result");
    assert_eq!(r["ok"], true, "{r}");
    assert_eq!(r["mode"]["leg_mode"], "ToolUtilization");
    server.shutdown();
    server.join();
}

#[test]
fn viewers_see_the_same_stream() {
    let server = start("hover");
    let mut a = Client::connect(&server);
    let mut b = Client::connect(&server);
    a.next_of("hello");
    b.next_of("hello");
    a.send(&json!({"type": "set_velocity", "linear": [0.05, 0.0, 0.0]}));
    let from_a: Vec<Value> = (0..60).map(|_| a.next_of("state")).collect();
    let from_b: Vec<Value> = (0..60).map(|_| b.next_of("state")).collect();
    let mut shared = 0;
    for fa in &from_a {
        if let Some(fb) = from_b.iter().find(|f| f["time"] == fa["time"]) {
            assert_eq!(fa, fb);
            shared += 1;
        }
    }
    assert!(shared >= 30, "only {shared} common frames");
    server.shutdown();
    server.join();
}
