"""Two-round federated protocol: messages, site steps, coordinator and transports."""

from .coordinator import assemble_reports, coordinator_run
from .messages import (
    SCHEMA,
    Round1Broadcast,
    Round1Request,
    Round1Upload,
    Round2Upload,
    SessionConfig,
    SiteError,
    decode,
    encode,
)
from .site import SiteWorker, site_round1, site_round2
from .transport import (
    DirectoryTransport,
    InProcessTransport,
    SiteServer,
    TcpTransport,
    serve_directory_site,
)

__all__ = [
    "SCHEMA",
    "DirectoryTransport",
    "InProcessTransport",
    "Round1Broadcast",
    "Round1Request",
    "Round1Upload",
    "Round2Upload",
    "SessionConfig",
    "SiteError",
    "SiteServer",
    "SiteWorker",
    "TcpTransport",
    "assemble_reports",
    "coordinator_run",
    "decode",
    "encode",
    "serve_directory_site",
    "site_round1",
    "site_round2",
]
