//! The boundary between applications and their node's trap handler.
//!
//! Applications drive a [`generator::Generator`], which turns virtual socket
//! calls into trap requests. Only calls that name endpoints cross the
//! boundary; reads and writes on a connected stream go straight to the peer.

pub mod channel;
pub mod generator;
pub mod wire;

use std::path::{Path, PathBuf};

use crate::model::AppId;

/// `<run-dir>/apps/<app_id>/trap`
pub fn channel_path(run_dir: &Path, app: &AppId) -> PathBuf {
    run_dir.join("apps").join(app.to_string()).join("trap")
}
