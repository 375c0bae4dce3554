//! TCP plumbing: a target server and the matching client transports.
//!
//! Framing is the wire module's length-prefixed format on the data port;
//! the sync port speaks the self-describing record/ack format. Connections
//! are handled one thread apiece — fine for a benchmark rig, not a
//! production server.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::host::{DataTransport, TransportError, WireCost};
use crate::sync::{ReplicaStore, SyncError, SyncTransport};
use crate::target::TargetEngine;
use crate::wire::{self, Message, SyncAck, SyncRecord};

const ACCEPT_POLL: Duration = Duration::from_millis(20);
const READ_POLL: Duration = Duration::from_millis(100);
const SYNC_RECORD_HEADER_LEN: usize = 32;
const SYNC_EXTENT_LEN: usize = 20;
const SYNC_ACK_LEN: usize = 20;

pub struct TargetServer {
    data_addr: SocketAddr,
    sync_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl TargetServer {
    /// Bind both listeners and start serving. Pass port 0 to let the OS
    /// choose; the bound addresses are available afterwards.
    pub fn start(
        engine: Arc<TargetEngine>,
        replicas: Arc<ReplicaStore>,
        data_addr: &str,
        sync_addr: &str,
        block_size: u32,
    ) -> io::Result<TargetServer> {
        let data = TcpListener::bind(data_addr)?;
        let sync = TcpListener::bind(sync_addr)?;
        let data_addr = data.local_addr()?;
        let sync_addr = sync.local_addr()?;
        data.set_nonblocking(true)?;
        sync.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));

        let mut threads = Vec::new();
        {
            let stop = stop.clone();
            let engine = engine.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("target-data".into())
                    .spawn(move || {
                        accept_loop(data, stop, move |s, stop| data_conn(s, stop, &engine))
                    })
                    .expect("spawn data acceptor"),
            );
        }
        {
            let stop = stop.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("target-sync".into())
                    .spawn(move || {
                        accept_loop(sync, stop, move |s, stop| {
                            sync_conn(s, stop, &replicas, block_size)
                        })
                    })
                    .expect("spawn sync acceptor"),
            );
        }
        Ok(TargetServer { data_addr, sync_addr, stop, threads })
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    pub fn sync_addr(&self) -> SocketAddr {
        self.sync_addr
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TargetServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop<F>(listener: TcpListener, stop: Arc<AtomicBool>, handle: F)
where
    F: Fn(TcpStream, &AtomicBool) + Send + Sync + 'static,
{
    let handle = Arc::new(handle);
    let mut conns: Vec<std::thread::JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nodelay(true).ok();
                // Timeouts let connection threads notice the stop flag.
                stream.set_read_timeout(Some(READ_POLL)).ok();
                let handle = handle.clone();
                let stop = stop.clone();
                conns.push(std::thread::spawn(move || handle(stream, &stop)));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(ACCEPT_POLL);
            }
            Err(_) => break,
        }
    }
    for c in conns {
        let _ = c.join();
    }
}

/// Read exactly `buf.len()` bytes. `Ok(false)` means the connection ended
/// cleanly (EOF between frames, or shutdown requested).
fn read_full(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => {
                return if filled == 0 {
                    Ok(false)
                } else {
                    Err(io::ErrorKind::UnexpectedEof.into())
                };
            }
            Ok(n) => filled += n,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock
                    || e.kind() == io::ErrorKind::TimedOut =>
            {
                if stop.load(Ordering::SeqCst) {
                    return if filled == 0 {
                        Ok(false)
                    } else {
                        Err(io::ErrorKind::UnexpectedEof.into())
                    };
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_frame(stream: &mut TcpStream, stop: &AtomicBool) -> io::Result<Option<Vec<u8>>> {
    let mut len_buf = [0u8; 4];
    if !read_full(stream, &mut len_buf, stop)? {
        return Ok(None);
    }
    // The length prefix counts the bytes that follow it.
    let total = u32::from_le_bytes(len_buf) as usize;
    if total < 1 || total > wire::MAX_FRAME_LEN as usize {
        return Err(io::ErrorKind::InvalidData.into());
    }
    let mut frame = vec![0u8; 4 + total];
    frame[..4].copy_from_slice(&len_buf);
    if !read_full(stream, &mut frame[4..], stop)? {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(Some(frame))
}

fn data_conn(mut stream: TcpStream, stop: &AtomicBool, engine: &TargetEngine) {
    loop {
        let frame = match read_frame(&mut stream, stop) {
            Ok(Some(f)) => f,
            _ => return,
        };
        let msg = match wire::decode_frame(&frame) {
            Ok((m, _)) => m,
            Err(_) => return, // malformed: drop the connection
        };
        let Some(resp) = engine.handle(&msg) else {
            return; // response messages are not requests
        };
        let out = match wire::encode_frame(&resp) {
            Ok(o) => o,
            Err(_) => return,
        };
        if stream.write_all(&out).is_err() {
            return;
        }
    }
}

fn sync_conn(mut stream: TcpStream, stop: &AtomicBool, replicas: &ReplicaStore, block_size: u32) {
    loop {
        let mut head = [0u8; SYNC_RECORD_HEADER_LEN];
        match read_full(&mut stream, &mut head, stop) {
            Ok(true) => {}
            _ => return,
        }
        let extent_count =
            u32::from_le_bytes([head[28], head[29], head[30], head[31]]) as usize;
        if extent_count > wire::MAX_SYNC_EXTENTS as usize {
            return;
        }
        let mut record_bytes = vec![0u8; SYNC_RECORD_HEADER_LEN + extent_count * SYNC_EXTENT_LEN];
        record_bytes[..SYNC_RECORD_HEADER_LEN].copy_from_slice(&head);
        if !matches!(
            read_full(&mut stream, &mut record_bytes[SYNC_RECORD_HEADER_LEN..], stop),
            Ok(true)
        ) {
            return;
        }
        let record = match wire::decode_sync_record(&record_bytes) {
            Ok((r, _)) => r,
            Err(_) => return,
        };
        let ack = match replicas.apply(record, block_size) {
            Ok(ack) => ack,
            Err(_) => return, // invalid map: refuse and drop
        };
        if stream.write_all(&wire::encode_sync_ack(&ack)).is_err() {
            return;
        }
    }
}

/// Client data transport over a single TCP connection. `roundtrip` holds
/// the stream lock for the full exchange, so callers may share one
/// transport across threads; requests serialize.
pub struct TcpDataTransport {
    addr: SocketAddr,
    stream: Mutex<Option<TcpStream>>,
}

impl TcpDataTransport {
    pub fn connect(addr: &str) -> io::Result<Self> {
        let addr: SocketAddr = addr
            .parse()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "bad address"))?;
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpDataTransport { addr, stream: Mutex::new(Some(stream)) })
    }

    fn ensure(&self, slot: &mut Option<TcpStream>) -> io::Result<()> {
        if slot.is_none() {
            let stream = TcpStream::connect(self.addr)?;
            stream.set_nodelay(true)?;
            *slot = Some(stream);
        }
        Ok(())
    }
}

impl DataTransport for TcpDataTransport {
    fn roundtrip(&self, msg: &Message) -> Result<(Message, WireCost), TransportError> {
        let frame = wire::encode_frame(msg)?;
        let mut slot = self.stream.lock();
        self.ensure(&mut slot)?;
        let stream = slot.as_mut().unwrap();
        let result = (|| -> Result<(Message, WireCost), TransportError> {
            stream.write_all(&frame)?;
            let stop = AtomicBool::new(false);
            let resp_frame = read_frame(stream, &stop)?.ok_or(TransportError::Closed)?;
            let (resp, _) = wire::decode_frame(&resp_frame)?;
            let want = request_id(msg);
            let got = request_id(&resp);
            if want != got {
                return Err(TransportError::IdMismatch { want, got });
            }
            Ok((
                resp,
                WireCost {
                    bytes_sent: frame.len() as u64,
                    bytes_received: resp_frame.len() as u64,
                },
            ))
        })();
        if result.is_err() {
            *slot = None; // reconnect on next call
        }
        result
    }
}

fn request_id(msg: &Message) -> u64 {
    match msg {
        Message::Read(m) => m.request_id,
        Message::ReadResp(m) => m.request_id,
        Message::Pushdown(m) => m.request_id,
        Message::PushdownResp(m) => m.request_id,
    }
}

/// Client sync transport: one reconnecting stream to the target's sync
/// listener.
pub struct TcpSyncTransport {
    addr: SocketAddr,
    stream: Mutex<Option<TcpStream>>,
}

impl TcpSyncTransport {
    pub fn connect(addr: &str) -> io::Result<Self> {
        let addr: SocketAddr = addr
            .parse()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "bad address"))?;
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpSyncTransport { addr, stream: Mutex::new(Some(stream)) })
    }
}

impl SyncTransport for TcpSyncTransport {
    fn send_record(&self, record: &SyncRecord) -> Result<SyncAck, SyncError> {
        let bytes = wire::encode_sync_record(record).map_err(SyncError::Wire)?;
        let mut slot = self.stream.lock();
        if slot.is_none() {
            let stream = TcpStream::connect(self.addr)
                .map_err(|e| SyncError::Transport(e.to_string()))?;
            stream.set_nodelay(true).ok();
            *slot = Some(stream);
        }
        let stream = slot.as_mut().unwrap();
        let result = (|| -> Result<SyncAck, SyncError> {
            stream
                .write_all(&bytes)
                .map_err(|e| SyncError::Transport(e.to_string()))?;
            let mut ack = [0u8; SYNC_ACK_LEN];
            stream
                .read_exact(&mut ack)
                .map_err(|e| SyncError::Transport(e.to_string()))?;
            wire::decode_sync_ack(&ack)
                .map(|(a, _)| a)
                .map_err(SyncError::Wire)
        })();
        if result.is_err() {
            *slot = None;
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::BlockDevice;
    use crate::host::HostClient;
    use crate::store::{ExtentStore, StoreConfig};
    use crate::sync::Synchronizer;
    use crate::target::ExecutionLimits;

    #[test]
    fn tcp_end_to_end() {
        let device = Arc::new(BlockDevice::memory(512, 1 << 13));
        let store = ExtentStore::new(device.clone(), StoreConfig::default());
        let replicas = ReplicaStore::new();
        let engine = TargetEngine::with_standard_functions(
            device,
            replicas.clone(),
            ExecutionLimits::default(),
        );
        let mut server =
            TargetServer::start(engine, replicas, "127.0.0.1:0", "127.0.0.1:0", 512).unwrap();

        let sync = Synchronizer::new(
            store.clone(),
            Box::new(TcpSyncTransport::connect(&server.sync_addr().to_string()).unwrap()),
        );
        let client = HostClient::new(
            store.clone(),
            sync.clone(),
            Box::new(TcpDataTransport::connect(&server.data_addr().to_string()).unwrap()),
        );

        let inode = store.create_file("f").unwrap();
        let data: Vec<u8> = (0..4096u32).map(|i| (i % 239) as u8).collect();
        store.append(inode, &data).unwrap();
        sync.drain_once().unwrap();

        let reply = client.read_remote(inode, 100, 1000);
        assert_eq!(reply.data.as_deref(), Some(&data[100..1100]));

        // Same exchange through TCP costs the same bytes as in-proc.
        assert_eq!(reply.stats.bytes_sent, 45);

        server.stop();
    }

    #[test]
    fn tcp_pushdown_end_to_end() {
        use crate::formats::btree::encode_leaf;
        use crate::functions::btree::{lookup_scratch, parse_lookup_result, LookupResult};
        use crate::functions::FN_BTREE_LOOKUP;
        use crate::host::PushdownStatus;

        let device = Arc::new(BlockDevice::memory(512, 1 << 13));
        let store = ExtentStore::new(device.clone(), StoreConfig::default());
        let replicas = ReplicaStore::new();
        let engine = TargetEngine::with_standard_functions(
            device,
            replicas.clone(),
            ExecutionLimits::default(),
        );
        let mut server =
            TargetServer::start(engine, replicas, "127.0.0.1:0", "127.0.0.1:0", 512).unwrap();
        let sync = Synchronizer::new(
            store.clone(),
            Box::new(TcpSyncTransport::connect(&server.sync_addr().to_string()).unwrap()),
        );
        let client = HostClient::new(
            store.clone(),
            sync.clone(),
            Box::new(TcpDataTransport::connect(&server.data_addr().to_string()).unwrap()),
        );

        let inode = store.create_file("tree").unwrap();
        let mut file = encode_leaf(512, 0, &[(7, 512)]);
        let mut log = vec![0u8; 512];
        log[..64].fill(0x5A);
        file.extend_from_slice(&log);
        store.append(inode, &file).unwrap();
        sync.drain_once().unwrap();

        let mut scratch = lookup_scratch(7);
        let reply = client.read_pushdown(&[inode], 0, 0, 512, FN_BTREE_LOOKUP, &mut scratch);
        assert_eq!(reply.status, PushdownStatus::Completed);
        assert_eq!(
            parse_lookup_result(&scratch),
            Some(LookupResult::Found(vec![0x5A; 64]))
        );
        server.stop();
    }

    #[test]
    fn malformed_frame_drops_connection() {
        let device = Arc::new(BlockDevice::memory(512, 64));
        let replicas = ReplicaStore::new();
        let engine = TargetEngine::new(device, replicas.clone(), ExecutionLimits::default());
        let mut server =
            TargetServer::start(engine, replicas, "127.0.0.1:0", "127.0.0.1:0", 512).unwrap();

        let mut s = TcpStream::connect(server.data_addr()).unwrap();
        s.write_all(&[0xFFu8; 64]).unwrap();
        let mut buf = [0u8; 16];
        // Server closes without replying.
        let n = s.read(&mut buf).unwrap_or(0);
        assert_eq!(n, 0);
        server.stop();
    }
}
