//! Trap channel over a unix stream socket. Connection handles ride along
//! with the reply frame as `SCM_RIGHTS` ancillary data.

use std::io::{self, IoSlice, IoSliceMut, Read, Write};
use std::net::TcpStream;
use std::os::fd::{AsRawFd, BorrowedFd, FromRawFd, OwnedFd, RawFd};
use std::os::unix::net::UnixStream;
use std::path::Path;

use nix::sys::socket::{
    getsockname, recvmsg, sendmsg, AddressFamily, ControlMessage, ControlMessageOwned, MsgFlags,
    SockaddrLike, SockaddrStorage,
};

use super::generator::{TrapError, TrapTransport};
use super::wire::{payload_len, TrapStatus, REPLY_HEADER, REQUEST_HEADER};
use crate::fabric::real::RealStream;
use crate::model::AppId;

/// Environment variable naming the trap channel of a sandboxed program.
pub const ENV_TRAP: &str = "APPNET_TRAP";
pub const ENV_APP_ID: &str = "APPNET_APP_ID";
pub const ENV_VIP: &str = "APPNET_VIP";

fn nix_io(e: nix::Error) -> io::Error {
    io::Error::from_raw_os_error(e as i32)
}

/// Read one request frame. `None` on a clean close between frames.
pub fn recv_request(sock: &mut UnixStream) -> io::Result<Option<Vec<u8>>> {
    let mut head = [0u8; REQUEST_HEADER];
    match sock.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = payload_len(&head).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut frame = head.to_vec();
    frame.resize(REQUEST_HEADER + n, 0);
    sock.read_exact(&mut frame[REQUEST_HEADER..])?;
    Ok(Some(frame))
}

pub fn send_request(sock: &mut UnixStream, frame: &[u8]) -> io::Result<()> {
    sock.write_all(frame)
}

/// Send a frame, attaching `fd` to its first byte.
pub fn send_with_fd(sock: &mut UnixStream, frame: &[u8], fd: Option<BorrowedFd<'_>>) -> io::Result<()> {
    let Some(fd) = fd else {
        return sock.write_all(frame);
    };
    let fds = [fd.as_raw_fd()];
    let cmsg = [ControlMessage::ScmRights(&fds)];
    let iov = [IoSlice::new(frame)];
    let sent = loop {
        match sendmsg::<()>(sock.as_raw_fd(), &iov, &cmsg, MsgFlags::empty(), None) {
            Ok(n) => break n,
            Err(nix::Error::EINTR) => continue,
            Err(e) => return Err(nix_io(e)),
        }
    };
    sock.write_all(&frame[sent..])
}

/// Read one reply frame and any descriptor that came with it.
pub fn recv_reply(sock: &mut UnixStream) -> io::Result<(Vec<u8>, Option<OwnedFd>)> {
    let mut head = [0u8; REPLY_HEADER];
    let mut got = 0;
    let mut fd: Option<OwnedFd> = None;
    while got < REPLY_HEADER {
        let mut space = nix::cmsg_space!([RawFd; 1]);
        let mut iov = [IoSliceMut::new(&mut head[got..])];
        let msg = match recvmsg::<()>(
            sock.as_raw_fd(),
            &mut iov,
            Some(&mut space),
            MsgFlags::MSG_CMSG_CLOEXEC,
        ) {
            Ok(m) => m,
            Err(nix::Error::EINTR) => continue,
            Err(e) => return Err(nix_io(e)),
        };
        if msg.bytes == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        for c in msg.cmsgs().map_err(nix_io)? {
            if let ControlMessageOwned::ScmRights(fds) = c {
                for raw in fds {
                    // SAFETY: the kernel just installed this descriptor for us
                    // and nothing else refers to it.
                    let owned = unsafe { OwnedFd::from_raw_fd(raw) };
                    if fd.is_none() {
                        fd = Some(owned);
                    }
                }
            }
        }
        got += msg.bytes;
    }
    let n = payload_len(&head).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut frame = head.to_vec();
    frame.resize(REPLY_HEADER + n, 0);
    sock.read_exact(&mut frame[REPLY_HEADER..])?;
    Ok((frame, fd))
}

/// Wrap a received descriptor as the right stream type.
pub fn stream_from_fd(fd: OwnedFd) -> io::Result<RealStream> {
    let addr: SockaddrStorage = getsockname(fd.as_raw_fd()).map_err(nix_io)?;
    Ok(match addr.family() {
        Some(AddressFamily::Unix) => RealStream::Unix(UnixStream::from(fd)),
        _ => RealStream::Tcp(TcpStream::from(fd)),
    })
}

/// Application end of a trap channel.
pub struct UnixTransport {
    sock: UnixStream,
}

impl UnixTransport {
    pub fn connect(path: &Path) -> Result<Self, TrapError> {
        match UnixStream::connect(path) {
            Ok(sock) => Ok(UnixTransport { sock }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(TrapError::Status(TrapStatus::AttachFailed))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Attach to the channel of `app` under `run_dir`.
    pub fn attach(run_dir: &Path, app: &AppId) -> Result<Self, TrapError> {
        Self::connect(&super::channel_path(run_dir, app))
    }

    /// Attach using the environment a sandboxed program is started with.
    pub fn from_env() -> Result<Self, TrapError> {
        let path = std::env::var_os(ENV_TRAP).ok_or(TrapError::Status(TrapStatus::AttachFailed))?;
        Self::connect(Path::new(&path))
    }
}

impl TrapTransport for UnixTransport {
    type Conn = RealStream;

    fn exchange(&mut self, request: &[u8]) -> io::Result<(Vec<u8>, Option<RealStream>)> {
        send_request(&mut self.sock, request)?;
        let (frame, fd) = recv_reply(&mut self.sock)?;
        Ok((frame, fd.map(stream_from_fd).transpose()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trap::wire::{TrapOp, TrapReply, TrapRequest};
    use std::os::fd::AsFd;

    #[test]
    fn descriptor_travels_with_reply() {
        let (mut app, mut handler) = UnixStream::pair().unwrap();
        let (mine, mut theirs) = UnixStream::pair().unwrap();
        let req = TrapRequest::new(TrapOp::Accept, 3);
        send_request(&mut app, &req.encode()).unwrap();
        let got = recv_request(&mut handler).unwrap().unwrap();
        assert_eq!(TrapRequest::decode(&got).unwrap(), req);
        let mut reply = TrapReply::ok(TrapOp::Accept, 4);
        reply.transfer = true;
        reply.payload = vec![7; 3];
        send_with_fd(&mut handler, &reply.encode(), Some(mine.as_fd())).unwrap();
        drop(mine);
        let (frame, fd) = recv_reply(&mut app).unwrap();
        assert_eq!(TrapReply::decode(&frame).unwrap(), reply);
        let mut s = stream_from_fd(fd.unwrap()).unwrap();
        assert!(s.is_local());
        theirs.write_all(b"hi").unwrap();
        let mut buf = [0u8; 2];
        s.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"hi");
    }

    #[test]
    fn clean_close_reads_as_none() {
        let (app, mut handler) = UnixStream::pair().unwrap();
        drop(app);
        assert!(recv_request(&mut handler).unwrap().is_none());
    }
}
