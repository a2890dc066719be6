"""flowgate: streaming per-flow anomaly detection with reversible WFQ gating."""

from flowgate.trace import TOOL_VERSION as __version__  # noqa: F401
