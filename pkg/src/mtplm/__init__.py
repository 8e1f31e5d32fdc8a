"""Multi-task (span corruption + sequence completion) protein language model pre-training."""

__version__ = "0.1.0"
