//! Queued, non-blocking frame writer for one stream.

use std::collections::VecDeque;
use std::io::{ErrorKind, Write};
use std::net::TcpStream;
use std::os::fd::AsRawFd;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use crate::topology::Epoch;
use crate::wire::MessageKind;

struct Queue {
    stream: TcpStream,
    /// `(frame, is the unsent tail of a frame)`
    frames: VecDeque<(Vec<u8>, bool)>,
    /// The writer thread holds a batch outside the lock.
    busy: bool,
    closed: bool,
}

/// Frames pushed here reach the stream in order. A frame is written inline
/// when the socket has room, otherwise a dedicated thread finishes the job.
pub(crate) struct Outbox {
    shared: Arc<(Mutex<Queue>, Condvar)>,
}

fn header(frame: &[u8]) -> Option<(u16, Epoch)> {
    let kind = u16::from_le_bytes(frame.get(4..6)?.try_into().ok()?);
    let epoch = u64::from_le_bytes(frame.get(6..14)?.try_into().ok()?);
    Some((kind, Epoch(epoch)))
}

/// Rank-to-rank traffic, which is dead once its epoch is over.
fn is_peer(kind: u16) -> bool {
    [
        MessageKind::AppData,
        MessageKind::CkptPut,
        MessageKind::CkptGet,
        MessageKind::CkptData,
    ]
    .iter()
    .any(|k| *k as u16 == kind)
}

/// Writes as much of `buf` as the socket takes without blocking.
fn write_some(stream: &TcpStream, buf: &[u8]) -> std::io::Result<usize> {
    let mut done = 0;
    while done < buf.len() {
        let rest = &buf[done..];
        // SAFETY: `rest` is valid for `rest.len()` bytes.
        let k = unsafe {
            libc::send(
                stream.as_raw_fd(),
                rest.as_ptr().cast(),
                rest.len(),
                libc::MSG_DONTWAIT | libc::MSG_NOSIGNAL,
            )
        };
        if k > 0 {
            done += k as usize;
            continue;
        }
        let e = std::io::Error::last_os_error();
        match e.kind() {
            _ if k == 0 => return Err(ErrorKind::WriteZero.into()),
            ErrorKind::WouldBlock => break,
            ErrorKind::Interrupted => {}
            _ => return Err(e),
        }
    }
    Ok(done)
}

fn drain(shared: &(Mutex<Queue>, Condvar), mut stream: TcpStream) {
    let (lock, cv) = shared;
    let mut batch = Vec::new();
    loop {
        {
            let mut q = lock.lock().unwrap();
            q.busy = false;
            while q.frames.is_empty() && !q.closed {
                q = cv.wait(q).unwrap();
            }
            if q.frames.is_empty() {
                return;
            }
            batch.clear();
            while let Some((f, _)) = q.frames.pop_front() {
                batch.extend_from_slice(&f);
                if batch.len() >= 1 << 16 {
                    break;
                }
            }
            q.busy = true;
        }
        if stream.write_all(&batch).is_err() {
            let mut q = lock.lock().unwrap();
            q.closed = true;
            q.frames.clear();
            return;
        }
    }
}

impl Outbox {
    pub(crate) fn new(stream: TcpStream) -> std::io::Result<Self> {
        let writer = stream.try_clone()?;
        let shared = Arc::new((
            Mutex::new(Queue {
                stream,
                frames: VecDeque::new(),
                busy: false,
                closed: false,
            }),
            Condvar::new(),
        ));
        let s = Arc::clone(&shared);
        thread::spawn(move || drain(&s, writer));
        Ok(Self { shared })
    }

    /// Queues `frame`; false once the stream has failed.
    pub(crate) fn push(&self, frame: Vec<u8>) -> bool {
        let (lock, cv) = &*self.shared;
        let mut q = lock.lock().unwrap();
        if q.closed {
            return false;
        }
        if q.frames.is_empty() && !q.busy {
            match write_some(&q.stream, &frame) {
                Ok(k) if k == frame.len() => return true,
                Ok(k) => q.frames.push_back((frame[k..].to_vec(), true)),
                Err(_) => {
                    q.closed = true;
                    return false;
                }
            }
        } else {
            q.frames.push_back((frame, false));
        }
        cv.notify_one();
        true
    }

    /// Drops queued peer frames older than `epoch`.
    pub(crate) fn purge_before(&self, epoch: Epoch) -> usize {
        let mut q = self.shared.0.lock().unwrap();
        let before = q.frames.len();
        q.frames.retain(|(f, tail)| {
            *tail || !matches!(header(f), Some((k, e)) if is_peer(k) && e < epoch)
        });
        before - q.frames.len()
    }
}

impl Drop for Outbox {
    fn drop(&mut self) {
        let (lock, cv) = &*self.shared;
        lock.lock().unwrap().closed = true;
        cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::RankId;
    use crate::wire::{read_frame, ControlMessage, Message};
    use std::io::BufReader;
    use std::net::TcpListener;

    fn frame(epoch: u64, body: Message) -> Vec<u8> {
        ControlMessage::new(Epoch(epoch), body).encode()
    }

    #[test]
    fn purge_keeps_control_and_current_frames() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let tx = TcpStream::connect(l.local_addr().unwrap()).unwrap();
        let (rx, _) = l.accept().unwrap();
        // no writer thread, so everything pushed stays queued
        let out = Outbox {
            shared: Arc::new((
                Mutex::new(Queue {
                    stream: tx,
                    frames: VecDeque::from([(vec![1, 2, 3], true)]),
                    busy: true,
                    closed: false,
                }),
                Condvar::new(),
            )),
        };
        let data = |e| frame(e, Message::AppData { src: RankId(0), dst: RankId(1), tag: 0, payload: vec![0; 8] });
        for f in [data(0), frame(0, Message::Revoke), data(1)] {
            out.push(f);
        }
        assert_eq!(out.purge_before(Epoch(1)), 1);
        let q = out.shared.0.lock().unwrap();
        let kinds: Vec<_> = q.frames.iter().map(|(f, tail)| (*tail, header(f))).collect();
        assert_eq!(kinds.len(), 3);
        assert!(kinds[0].0);
        assert_eq!(kinds[1].1, Some((MessageKind::Revoke as u16, Epoch(0))));
        assert_eq!(kinds[2].1, Some((MessageKind::AppData as u16, Epoch(1))));
        drop(rx);
    }

    #[test]
    fn frames_arrive_in_order() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let tx = TcpStream::connect(l.local_addr().unwrap()).unwrap();
        let (rx, _) = l.accept().unwrap();
        let out = Outbox::new(tx).unwrap();
        let sent: Vec<ControlMessage> = (0..200)
            .map(|i| ControlMessage::new(Epoch(i), Message::AppData { src: RankId(0), dst: RankId(1), tag: i, payload: vec![i as u8; 4096] }))
            .collect();
        for m in &sent {
            assert!(out.push(m.encode()));
        }
        let mut r = BufReader::new(rx);
        for m in &sent {
            assert_eq!(read_frame(&mut r).unwrap().as_ref(), Some(m));
        }
    }
}
