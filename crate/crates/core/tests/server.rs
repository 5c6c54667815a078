mod common;

use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use common::{dims, tiny_config};
use streamfx::flow::split_chunks;
use streamfx::model::DenoiserParams;
use streamfx::protocol::{decode_tensor, encode_tensor, read_message, write_frame, Message};
use streamfx::server::{Server, ServerHandle, WS_PATH};
use streamfx::stream::{Condition, ConditionUpdate, SessionConfig, StreamSession};
use streamfx::world::{frame, generate_source};
use streamfx::Tensor;
use tungstenite::Message as WsMessage;

fn start() -> (ServerHandle, Arc<DenoiserParams<f32>>) {
    let p = Arc::new(DenoiserParams::init(tiny_config(), 17).unwrap());
    (Server::bind("127.0.0.1:0", Arc::clone(&p)).unwrap().spawn().unwrap(), p)
}

fn connect(h: &ServerHandle) -> TcpStream {
    let s = TcpStream::connect(h.addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    s
}

fn call(s: &mut TcpStream, m: &Message) -> Message {
    write_frame(s, m).unwrap();
    read_message(s).unwrap().expect("reply")
}

fn init(seed: u64, label: Option<usize>, reference: Option<&Tensor<f32>>) -> Message {
    Message::Init { window: 3, steps: 4, cfg_scale: 2.0, effect_label: label, reference_b64: reference.map(encode_tensor), seed: Some(seed) }
}

fn chunk_msg(index: usize, t: &Tensor<f32>) -> Message {
    Message::Chunk { index, frames_b64: encode_tensor(t), shape: t.shape().to_vec() }
}

fn source_chunks(seed: u64, n: usize) -> (Tensor<f32>, Vec<Tensor<f32>>) {
    let c = tiny_config();
    let v = generate_source(seed, dims(&c, n)).unwrap();
    let chunks = split_chunks(&v, c.c_frames).unwrap();
    (v, chunks)
}

#[test]
fn framed_session_matches_local_session() {
    let (h, p) = start();
    let (video, chunks) = source_chunks(1, 3);
    let r = frame(&video, 0).unwrap();
    let r2 = frame(&video, 5).unwrap();
    let mut local = StreamSession::open(
        Arc::clone(&p),
        SessionConfig { window: 3, steps: 4, cfg_scale: 2.0, noise_seed: 8 },
        Condition { reference: Some(r.clone()), label: Some(2) },
    )
    .unwrap();

    let mut s = connect(&h);
    assert_eq!(call(&mut s, &init(8, Some(2), Some(&r))), Message::Ack { of: "init".into(), effective_chunk: Some(0) });
    for (i, c) in chunks.iter().enumerate() {
        if i == 1 {
            let m = Message::Condition { reference_b64: Some(encode_tensor(&r2)), effect_label: Some(0) };
            assert_eq!(call(&mut s, &m), Message::Ack { of: "condition".into(), effective_chunk: Some(1) });
            local.update_condition(ConditionUpdate { reference: Some(r2.clone()), label: Some(0) }).unwrap();
        }
        let want = local.push_chunk(c).unwrap();
        match call(&mut s, &chunk_msg(i, c)) {
            Message::Result { index, frames_b64, chunk_ms } => {
                assert_eq!(index, i);
                assert!(chunk_ms >= 0.0);
                assert_eq!(decode_tensor(&frames_b64, c.shape()).unwrap(), want.frames);
            }
            other => panic!("{other:?}"),
        }
    }
    write_frame(&mut s, &Message::Close {}).unwrap();
    assert!(matches!(read_message(&mut s).unwrap(), Some(Message::Stats { chunks: 3, .. })));
    assert_eq!(read_message(&mut s).unwrap(), Some(Message::Ack { of: "close".into(), effective_chunk: None }));
    h.shutdown().unwrap();
}

#[test]
fn errors_keep_the_connection_open() {
    let (h, _) = start();
    let (_, chunks) = source_chunks(2, 2);
    let mut s = connect(&h);

    s.write_all(&[0, 0, 0, 5, b'n', b'o', b'p', b'e', b'!']).unwrap();
    assert!(matches!(read_message(&mut s).unwrap(), Some(Message::Error { code, .. }) if code == "bad_message"));
    assert!(matches!(call(&mut s, &chunk_msg(0, &chunks[0])), Message::Error { code, .. } if code == "session"));
    assert!(matches!(call(&mut s, &init(0, Some(9), None)), Message::Error { code, .. } if code == "session"));
    assert!(matches!(call(&mut s, &init(0, None, None)), Message::Ack { .. }));
    assert!(matches!(call(&mut s, &chunk_msg(1, &chunks[0])), Message::Error { code, .. } if code == "bad_index"));
    let bad = Tensor::zeros(&[1, 4, 4, 3]);
    assert!(matches!(call(&mut s, &chunk_msg(0, &bad)), Message::Error { code, .. } if code == "bad_shape"));
    let lying = Message::Chunk { index: 0, frames_b64: "AAAA".into(), shape: vec![2, 4, 4, 3] };
    assert!(matches!(call(&mut s, &lying), Message::Error { code, .. } if code == "bad_message"));
    assert!(matches!(call(&mut s, &Message::Ack { of: "x".into(), effective_chunk: None }), Message::Error { code, .. } if code == "unexpected"));
    assert!(matches!(call(&mut s, &chunk_msg(0, &chunks[0])), Message::Result { index: 0, .. }));
}

#[test]
fn oversize_frame_closes_connection() {
    let (h, _) = start();
    let mut s = connect(&h);
    s.write_all(&u32::MAX.to_be_bytes()).unwrap();
    assert!(matches!(read_message(&mut s).unwrap(), Some(Message::Error { code, .. }) if code == "frame_too_large"));
    assert_eq!(read_message(&mut s).unwrap(), None);
}

#[test]
fn short_connections_do_not_wedge_the_server() {
    let (h, _) = start();
    for bytes in [&b""[..], b"G", b"\x00\x00"] {
        let mut s = connect(&h);
        s.write_all(bytes).unwrap();
        drop(s);
    }
    let mut s = connect(&h);
    assert!(matches!(call(&mut s, &init(0, None, None)), Message::Ack { .. }));
}

#[test]
fn concurrent_connections_are_independent() {
    let (h, p) = start();
    let addr = h.addr();
    let workers: Vec<_> = (0..2u64)
        .map(|k| {
            let p = Arc::clone(&p);
            std::thread::spawn(move || {
                let (_, chunks) = source_chunks(10 + k, 3);
                let mut local = StreamSession::open(
                    p,
                    SessionConfig { window: 3, steps: 4, cfg_scale: 2.0, noise_seed: k },
                    Condition { reference: None, label: Some(k as usize) },
                )
                .unwrap();
                let mut s = TcpStream::connect(addr).unwrap();
                assert!(matches!(call(&mut s, &init(k, Some(k as usize), None)), Message::Ack { .. }));
                for (i, c) in chunks.iter().enumerate() {
                    let want = local.push_chunk(c).unwrap();
                    match call(&mut s, &chunk_msg(i, c)) {
                        Message::Result { frames_b64, .. } => assert_eq!(decode_tensor(&frames_b64, c.shape()).unwrap(), want.frames),
                        other => panic!("{other:?}"),
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
}

#[test]
fn websocket_binding_serves_the_same_protocol() {
    let (h, _) = start();
    let (_, chunks) = source_chunks(3, 2);
    let url = format!("ws://{}{WS_PATH}", h.addr());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let mut ws_call = |m: &Message| -> Message {
        ws.send(WsMessage::Text(m.to_json().unwrap())).unwrap();
        match ws.read().unwrap() {
            WsMessage::Text(t) => Message::from_json(t.as_bytes()).unwrap(),
            other => panic!("{other:?}"),
        }
    };
    assert!(matches!(ws_call(&init(1, Some(1), None)), Message::Ack { .. }));
    for (i, c) in chunks.iter().enumerate() {
        assert!(matches!(ws_call(&chunk_msg(i, c)), Message::Result { index, .. } if index == i));
    }
    assert!(matches!(ws_call(&Message::Close {}), Message::Stats { chunks: 2, .. }));

    let (mut ws2, _) = tungstenite::connect(format!("ws://{}{WS_PATH}", h.addr())).unwrap();
    ws2.send(WsMessage::Text("{not json".into())).unwrap();
    match ws2.read().unwrap() {
        WsMessage::Text(t) => assert!(matches!(Message::from_json(t.as_bytes()).unwrap(), Message::Error { code, .. } if code == "bad_message")),
        other => panic!("{other:?}"),
    }

    assert!(tungstenite::connect(format!("ws://{}/elsewhere", h.addr())).is_err());
}
