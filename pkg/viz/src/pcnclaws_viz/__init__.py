"""Post-hoc visualization of simulator output files.

Reads the binary trajectory format and the line-oriented training and
estimation logs directly; the simulator package itself is not imported.
"""

__version__ = "0.1.0"
