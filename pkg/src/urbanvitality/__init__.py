"""Urban-diversity metrics and mobile-activity vitality analysis."""

__version__ = "0.1.0"
