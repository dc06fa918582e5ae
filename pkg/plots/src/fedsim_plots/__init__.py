"""Report figures from fedsim metrics.csv files."""

from .frames import MetricsFrame, SchemaError, load_metrics
from .render import plot_curves, plot_roundtime_violin

__version__ = "0.1.0"
