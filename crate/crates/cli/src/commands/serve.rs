use std::sync::Arc;

use anyhow::Context as _;

use cyclodet_service::AppState;

use crate::args::ServeArgs;
use crate::config::Context;
use crate::{Failure, Summary};

/// Blocks until the process is stopped.
pub fn serve(ctx: &Context, args: &ServeArgs) -> Result<Summary, Failure> {
    let mut cfg = ctx.cfg.clone();
    if let Some(bind) = &args.bind {
        cfg.service.bind = bind.clone();
    }
    let state = AppState::open(&cfg).with_context(|| format!("opening project {}", cfg.data_dir.display()))?;
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime
        .block_on(cyclodet_service::serve(Arc::new(state), &cfg.service.bind))
        .with_context(|| format!("serving on {}", cfg.service.bind))?;
    Ok(Summary { text: "server stopped".into(), json: serde_json::json!({ "stopped": true }) })
}
