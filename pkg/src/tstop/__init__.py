"""Robust two-stage time-optimal motion planning and control.

A planner that alternates a Riccati feedback-gain subproblem with a
frozen-margin nominal time-optimal OCP, plus a closed-loop simulator with
asynchronous (timely) replanning.
"""

__version__ = "0.1.0"
