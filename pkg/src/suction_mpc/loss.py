"""Lift-to-goal loss: half the squared height deficit of every particle below ``y_goal``."""
import numpy as np


def particle_loss(x, y_goal):
    y = float(x[1])
    return 0.5 * (y_goal - y) ** 2 if y < y_goal else 0.0


def state_loss(positions, active, y_goal):
    y = positions[active, 1]
    deficit = y_goal - y[y < y_goal]
    return float(0.5 * np.sum(deficit * deficit))


def total_loss(states, y_goal):
    """Sum of :func:`state_loss` over ``(positions, active)`` pairs, one per time step."""
    total = 0.0
    for positions, active in states:
        total = total + state_loss(positions, active, y_goal)
    return total


def loss_node(tape, y_goal, states=None):
    """Record the total loss over ``tape.states`` (or ``states``) and return its node."""
    nodes = []
    for x_node, active in (tape.states if states is None else states):
        mask = np.asarray(active, dtype=bool)

        def fwd(x, mask=mask):
            return state_loss(x, mask, y_goal), None

        def vjp(g, cache, x, mask=mask):
            bar = np.zeros_like(x)
            rows = mask & (x[:, 1] < y_goal)
            bar[rows, 1] = -g * (y_goal - x[rows, 1])
            return (bar,)

        nodes.append(tape.op("loss", fwd, vjp, x_node))
    if not nodes:
        return tape.op("loss", lambda: (0.0, None), None)
    return tape.total(nodes)
