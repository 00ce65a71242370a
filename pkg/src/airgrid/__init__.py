"""High-resolution PM2.5/PM10 prediction from official monitoring stations,
low-cost sensor time series, road network data and traffic congestion."""

__version__ = "0.1.0"
