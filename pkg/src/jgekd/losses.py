"""Joint-graph distillation losses.

A probability vector p induces the rank-one joint graph A = outer(p, p) whose
(i, j) entry is the joint probability of classes i and j. Training penalizes
the entrywise cross entropy between a predicted graph and a target graph,
averaged over all N*N positions:

    loss = (1/N^2) * sum(-A_pred * log(clamp(A_target)))

The self-distillation variant compares the graphs of a sample and its
corrupted twin through shared weights; the teacher variant compares the
cross graph of the two student branches against the graph spanned by the
smoothed label and a frozen teacher's prediction. All functions accept plain
arrays or graph Nodes and return Nodes, so they can sit inside a training
graph or be evaluated standalone via .value.

A deliberate asymmetry: the predicted graph multiplies the log of the target
graph, so the corrupted branch (self variant) and the teacher graph always
sit inside the log. Swapping the roles looks tempting but changes the
optimization target; the direction here is the one trained against.
"""

from __future__ import annotations

import numpy as np

from . import numerics as ng
from .numerics import LOG_FLOOR, Node, ShapeError


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return ng.leaf(x)


def _as_vector_node(x, op_name) -> Node:
    node = _as_node(x)
    if node.value.ndim != 1 or node.value.shape[0] < 1:
        raise ShapeError("%s: expected a probability vector, got shape %s" % (op_name, node.value.shape))
    return node


def _pair(a, b, op_name) -> tuple[Node, Node]:
    na = _as_vector_node(a, op_name)
    nb = _as_vector_node(b, op_name)
    if na.value.shape != nb.value.shape:
        raise ShapeError(
            "%s: vectors disagree, %s vs %s" % (op_name, na.value.shape, nb.value.shape)
        )
    return na, nb


def joint_graph(p) -> Node:
    """A = outer(p, p); symmetric, rank one, entries sum to 1 for valid p."""
    node = _as_vector_node(p, "joint_graph")
    return ng.outer(node, node)


def cross_joint_graph(p, p_other) -> Node:
    """A[i, j] = p[i] * p_other[j]; couples the two siamese branches."""
    na, nb = _pair(p, p_other, "cross_joint_graph")
    return ng.outer(na, nb)


def smooth_labels(q, epsilon: float) -> np.ndarray:
    """Spread epsilon of a one-hot label uniformly over the other classes."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] < 2:
        raise ValueError("smooth_labels: need a one-hot vector of length >= 2")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("smooth_labels: epsilon must be in [0, 1), got %r" % epsilon)
    ones = q == 1.0
    if not (ones.sum() == 1 and np.all((q == 0.0) | ones)):
        raise ValueError("smooth_labels: q is not one-hot")
    n = q.shape[0]
    out = np.full(n, epsilon / (n - 1))
    out[int(np.argmax(ones))] = 1.0 - epsilon
    return out


def teacher_joint_graph(q_smooth, p_teacher) -> Node:
    """A[i, j] = q_smooth[i] * p_teacher[j], the teacher-side target graph."""
    na, nb = _pair(q_smooth, p_teacher, "teacher_joint_graph")
    return ng.outer(na, nb)


def _as_graph_node(a, op_name) -> Node:
    node = _as_node(a)
    v = node.value
    if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
        raise ShapeError("%s: expected a square joint graph, got shape %s" % (op_name, v.shape))
    return node


def joint_graph_entropy(a_pred, a_target) -> Node:
    """Entrywise -A_pred * log(A_target), target clamped into [1e-12, 1]."""
    pred = _as_graph_node(a_pred, "joint_graph_entropy")
    target = _as_graph_node(a_target, "joint_graph_entropy")
    if pred.value.shape != target.value.shape:
        raise ShapeError(
            "joint_graph_entropy: graphs disagree, %s vs %s"
            % (pred.value.shape, target.value.shape)
        )
    return ng.scale(ng.mul(pred, ng.log_clamped(target, LOG_FLOOR, 1.0)), -1.0)


def jgekd_loss(a_pred, a_target) -> Node:
    """Mean of joint_graph_entropy over all N*N positions."""
    pred = _as_graph_node(a_pred, "jgekd_loss")
    n = pred.value.shape[0]
    return ng.scale(ng.reduce_sum(joint_graph_entropy(pred, a_target)), 1.0 / (n * n))


def jgeskd_loss(p, p_prime, detach_target: bool = False) -> Node:
    """Self-distillation between a sample and its corrupted twin.

    By default the gradient flows through both branches (true siamese);
    detach_target freezes the log-side branch at its current value.
    """
    np_, npp = _pair(p, p_prime, "jgeskd_loss")
    target = ng.detach(npp) if detach_target else npp
    return jgekd_loss(joint_graph(np_), joint_graph(target))


def jgetkd_loss(p_student, p_student_prime, q, p_teacher, epsilon: float = 0.1) -> Node:
    """Teacher distillation on the cross graph of the two student branches.

    The target graph spans the smoothed label and the teacher prediction;
    both enter as constants, so gradients reach only the student branches.
    """
    ps, psp = _pair(p_student, p_student_prime, "jgetkd_loss")
    pt = p_teacher.value if isinstance(p_teacher, Node) else np.asarray(p_teacher, dtype=np.float64)
    q_smooth = smooth_labels(q, epsilon)
    if pt.shape != ps.value.shape:
        raise ShapeError(
            "jgetkd_loss: teacher prediction shape %s does not match student %s"
            % (pt.shape, ps.value.shape)
        )
    if q_smooth.shape != ps.value.shape:
        raise ShapeError(
            "jgetkd_loss: label length %s does not match student %s"
            % (q_smooth.shape, ps.value.shape)
        )
    target = teacher_joint_graph(ng.leaf(q_smooth), ng.leaf(pt))
    return jgekd_loss(cross_joint_graph(ps, psp), target)


def cross_entropy_smoothed(p, q, epsilon: float = 0.0) -> Node:
    """-sum(q_smooth * log(p)) with the usual positive clamp inside the log."""
    node = _as_vector_node(p, "cross_entropy_smoothed")
    q_smooth = smooth_labels(q, epsilon)
    if q_smooth.shape != node.value.shape:
        raise ShapeError(
            "cross_entropy_smoothed: label length %s vs prediction %s"
            % (q_smooth.shape, node.value.shape)
        )
    return ng.scale(ng.reduce_sum(ng.mul(ng.leaf(q_smooth), ng.log_clamped(node))), -1.0)


def vanilla_kd_loss(p_student, p_teacher) -> Node:
    """Plain distillation baseline: -sum(p_teacher * log(p_student))."""
    ps, pt = _pair(p_student, p_teacher, "vanilla_kd_loss")
    return ng.scale(ng.reduce_sum(ng.mul(ng.detach(pt), ng.log_clamped(ps))), -1.0)


def total_loss(ce, kd, alpha: float = 1.0, beta: float = 1.0) -> Node:
    """alpha * ce + beta * kd, the combined training objective."""
    if alpha < 0.0 or beta < 0.0:
        raise ValueError("total_loss: coefficients must be nonnegative, got %r, %r" % (alpha, beta))
    ce_node = _as_node(ce)
    kd_node = _as_node(kd)
    if ce_node.value.ndim != 0 or kd_node.value.ndim != 0:
        raise ShapeError(
            "total_loss: both terms must be scalars, got %s and %s"
            % (ce_node.value.shape, kd_node.value.shape)
        )
    return ng.add(ng.scale(ce_node, alpha), ng.scale(kd_node, beta))
