"""White-box membership-inference auditing with honest attack reporting."""

__version__ = "0.1.0"
