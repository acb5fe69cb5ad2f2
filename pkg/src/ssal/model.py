"""Networks with auxiliary group-label branches on a shared trunk.

A network is described by an architecture (trunk blocks, main head) given in
the compact layer syntax, plus zero or more branch specs naming the trunk
attachment point they read from. The trunk runs once per forward pass; the
main head consumes the final trunk activation and every branch consumes the
activation at its attachment point. Parameters are created in a fixed order
(trunk, then main head, then branches) so that trunk/head initialization is
unchanged by adding or removing branches under the same seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .grouping import GroupMapping


@dataclass
class TrunkSpec:
    """Ordered trunk blocks; each block name doubles as the attachment point
    for the activation computed after it."""

    blocks: list  # of (name, [layer strings])

    def __post_init__(self):
        names = [name for name, _ in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attachment point names in {names}")

    @property
    def attachment_points(self):
        return [name for name, _ in self.blocks]


@dataclass
class AuxBranchSpec:
    attachment_point: str
    layer_strings: list
    group_mapping: GroupMapping
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError("branch loss weight must be >= 0")


@dataclass
class NetworkArch:
    input_shape: tuple  # sample shape, no batch dimension
    class_count: int
    trunk: TrunkSpec
    main_head: list  # layer strings


class _Stack:
    """A built, named sequence of layers."""

    def __init__(self, name, layer_strings, in_shape, rng, dtype):
        self.name = name
        self.layer_strings = list(layer_strings)
        self.layers = L.layers_from_strings(layer_strings)
        shape = tuple(in_shape)
        for i, layer in enumerate(self.layers):
            layer.name = f"{name}.{i}_{layer.kind}"
            shape = layer.build(shape, rng, dtype)
        self.out_shape = shape

    def apply(self, x, mode):
        for layer in self.layers:
            x = L.apply_layer(layer, x, mode)
        return x

    def infer_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def batch_norm_layers(self):
        found = []
        for layer in self.layers:
            if isinstance(layer, L.BatchNorm2d):
                found.append(layer)
            elif isinstance(layer, L.Concat):
                found.extend(sub for path in layer.paths for sub in path
                             if isinstance(sub, L.BatchNorm2d))
        return found


class SSALNetwork:
    def __init__(self, arch, branch_specs, trunk_stacks, head_stack, branch_stacks):
        self.arch = arch
        self.branch_specs = list(branch_specs)
        self.trunk_stacks = trunk_stacks  # list of (attachment name, _Stack)
        self.head_stack = head_stack
        self.branch_stacks = branch_stacks
        self.class_count = arch.class_count
        self._bn_layers = [bn for _, s in trunk_stacks for bn in s.batch_norm_layers()]
        self._bn_layers += head_stack.batch_norm_layers()
        for s in branch_stacks:
            self._bn_layers += s.batch_norm_layers()

    @property
    def branch_count(self):
        return len(self.branch_stacks)

    @property
    def group_mappings(self):
        return [spec.group_mapping for spec in self.branch_specs]

    @property
    def loss_weights(self):
        return [spec.loss_weight for spec in self.branch_specs]

    def forward(self, batch, mode, with_activations=False):
        """One pass over a batch: returns (main logits, [branch logits]).

        The trunk runs once; each branch reads the cached activation at its
        attachment point.
        """
        if tuple(batch.shape[1:]) != tuple(self.arch.input_shape):
            raise ValueError(
                f"batch sample shape {tuple(batch.shape[1:])} != "
                f"network input shape {tuple(self.arch.input_shape)}")
        if mode == "eval" and any(bn.batches_seen == 0 for bn in self._bn_layers):
            warnings.warn("eval before any training: batch-norm running "
                          "statistics are still at their initial values")
        activations = {}
        x = batch
        for name, stack in self.trunk_stacks:
            x = stack.apply(x, mode)
            activations[name] = x
        main_logits = self.head_stack.apply(x, mode)
        branch_logits = [
            stack.apply(activations[spec.attachment_point], mode)
            for spec, stack in zip(self.branch_specs, self.branch_stacks)]
        if with_activations:
            return main_logits, branch_logits, activations
        return main_logits, branch_logits

    def trunk_parameters(self):
        return [p for _, s in self.trunk_stacks for p in s.parameters()]

    def parameters(self):
        params = self.trunk_parameters()
        params += self.head_stack.parameters()
        for s in self.branch_stacks:
            params += s.parameters()
        return params

    def parameter_counts(self):
        counts = {"trunk": sum(p.data.size for p in self.trunk_parameters()),
                  "main_head": sum(p.data.size for p in self.head_stack.parameters())}
        for i, s in enumerate(self.branch_stacks):
            counts[f"branch{i}"] = sum(p.data.size for p in s.parameters())
        counts["total"] = sum(counts.values())
        return counts

    def named_arrays(self):
        """Parameters plus batch-norm buffers, in creation order."""
        out = [(p.name, p.data) for p in self.parameters()]
        for _, s in self.trunk_stacks:
            out += s.buffers()
        out += self.head_stack.buffers()
        for s in self.branch_stacks:
            out += s.buffers()
        return out

    def load_named_arrays(self, records):
        current = self.named_arrays()
        if [n for n, _ in current] != [n for n, _ in records]:
            raise ValueError("checkpoint does not match this architecture")
        for (_, dst), (_, src) in zip(current, records):
            if dst.shape != src.shape:
                raise ValueError("checkpoint array shape mismatch")
            dst[...] = src.astype(dst.dtype)


def build_network(arch, branch_specs=(), seed=0, dtype=np.float32, rng=None):
    """Materialize a network: trunk, main head, then branches, in order.

    Attachment points must name trunk blocks; each branch's output width
    must equal its group mapping's group count; the main head must end at
    the class count.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    points = arch.trunk.attachment_points
    for spec in branch_specs:
        if spec.attachment_point not in points:
            raise ValueError(
                f"unknown attachment point {spec.attachment_point!r}; trunk has {points}")

    trunk_stacks = []
    shape = (1,) + tuple(arch.input_shape)
    point_shapes = {}
    for name, strings in arch.trunk.blocks:
        stack = _Stack(f"trunk.{name}", strings, shape, rng, dtype)
        shape = stack.out_shape
        point_shapes[name] = shape
        trunk_stacks.append((name, stack))

    head_stack = _Stack("main_head", arch.main_head, shape, rng, dtype)
    if head_stack.out_shape != (1, arch.class_count):
        raise ValueError(
            f"main head ends at shape {head_stack.out_shape[1:]}, "
            f"expected width {arch.class_count}")

    branch_stacks = []
    for i, spec in enumerate(branch_specs):
        stack = _Stack(f"branch{i}", spec.layer_strings,
                       point_shapes[spec.attachment_point], rng, dtype)
        width = spec.group_mapping.group_count
        if stack.out_shape != (1, width):
            raise ValueError(
                f"branch {i} ends at shape {stack.out_shape[1:]}, but its "
                f"group mapping has {width} groups")
        branch_stacks.append(stack)

    return SSALNetwork(arch, branch_specs, trunk_stacks, head_stack, branch_stacks)


class FusedControlNetwork:
    """Branch-equipped layout without the group objective: branch outputs
    feed the main prediction path through a fusion stage and the network
    trains with a single loss. Forward returns an empty branch list so the
    standard trainer applies unchanged."""

    def __init__(self, arch, fusion, trunk_stacks, head_stack, branch_stacks,
                 branch_points, fusion_stack):
        self.arch = arch
        self.fusion = fusion
        self.trunk_stacks = trunk_stacks
        self.head_stack = head_stack  # may be None for gap_concat
        self.branch_stacks = branch_stacks
        self.branch_points = branch_points
        self.fusion_stack = fusion_stack
        self.class_count = arch.class_count
        self.branch_specs = []
        self.group_mappings = []
        self.loss_weights = []
        self.branch_count = 0

    def forward(self, batch, mode, with_activations=False):
        activations = {}
        x = batch
        for name, stack in self.trunk_stacks:
            x = stack.apply(x, mode)
            activations[name] = x
        branch_outs = [stack.apply(activations[point], mode)
                       for point, stack in zip(self.branch_points, self.branch_stacks)]
        if self.head_stack is not None:
            main_out = self.head_stack.apply(x, mode)
        else:
            main_out = x
        fused = T.concat([main_out] + branch_outs, axis=1)
        logits = self.fusion_stack.apply(fused, mode)
        if with_activations:
            return logits, [], activations
        return logits, []

    def trunk_parameters(self):
        return [p for _, s in self.trunk_stacks for p in s.parameters()]

    def parameters(self):
        params = self.trunk_parameters()
        if self.head_stack is not None:
            params += self.head_stack.parameters()
        for s in self.branch_stacks:
            params += s.parameters()
        params += self.fusion_stack.parameters()
        return params

    def parameter_counts(self):
        counts = {"trunk": sum(p.data.size for p in self.trunk_parameters()),
                  "main_head": sum(p.data.size for p in self.head_stack.parameters())
                  if self.head_stack is not None else 0}
        for i, s in enumerate(self.branch_stacks):
            counts[f"branch{i}"] = sum(p.data.size for p in s.parameters())
        counts["fusion"] = sum(p.data.size for p in self.fusion_stack.parameters())
        counts["total"] = sum(counts.values())
        return counts

    def named_arrays(self):
        out = [(p.name, p.data) for p in self.parameters()]
        for _, s in self.trunk_stacks:
            out += s.buffers()
        if self.head_stack is not None:
            out += self.head_stack.buffers()
        for s in self.branch_stacks:
            out += s.buffers()
        out += self.fusion_stack.buffers()
        return out


def variant_no_ssal(net, fusion, seed=0, dtype=np.float32, hidden_width=2048, rng=None):
    """Control baseline: same layer layout as `net`, no group objective.

    gap_concat: branch outputs join the main head's pre-output feature (the
    input of its final linear layer) and a fresh linear layer predicts the
    classes from the widened feature. concat_fc: main output and branch
    outputs are concatenated, passed through a hidden fully-connected layer
    (default width 2048), then a final linear layer. Parameters are freshly
    initialized; the returned network has exactly one output head.
    """
    if fusion not in ("gap_concat", "concat_fc"):
        raise ValueError(f"unknown fusion {fusion!r}")
    if net.branch_count < 1:
        raise ValueError("variant requires a network with at least one branch")
    if rng is None:
        rng = np.random.default_rng(seed)
    arch = net.arch

    trunk_stacks = []
    shape = (1,) + tuple(arch.input_shape)
    point_shapes = {}
    for name, strings in arch.trunk.blocks:
        stack = _Stack(f"trunk.{name}", strings, shape, rng, dtype)
        shape = stack.out_shape
        point_shapes[name] = shape
        trunk_stacks.append((name, stack))

    if fusion == "gap_concat":
        head_strings = list(arch.main_head)
        if not head_strings or not head_strings[-1].startswith("fc:"):
            raise ValueError(
                "gap_concat fusion needs a main head ending in a linear layer")
        body_strings = head_strings[:-1]
        head_stack = _Stack("main_head", body_strings, shape, rng, dtype) \
            if body_strings else None
        feature_shape = head_stack.out_shape if head_stack is not None else shape
        if len(feature_shape) != 2:
            raise ValueError(
                f"gap_concat fusion needs a flat pre-output feature, got {feature_shape}")
    else:
        head_stack = _Stack("main_head", arch.main_head, shape, rng, dtype)
        feature_shape = head_stack.out_shape

    branch_stacks = []
    branch_points = []
    for i, spec in enumerate(net.branch_specs):
        stack = _Stack(f"branch{i}", spec.layer_strings,
                       point_shapes[spec.attachment_point], rng, dtype)
        branch_stacks.append(stack)
        branch_points.append(spec.attachment_point)

    fused_width = feature_shape[1] + sum(s.out_shape[1] for s in branch_stacks)
    if fusion == "gap_concat":
        fusion_strings = [f"fc:{arch.class_count}"]
    else:
        fusion_strings = [f"fc:{hidden_width}", "relu", f"fc:{arch.class_count}"]
    fusion_stack = _Stack("fusion", fusion_strings, (1, fused_width), rng, dtype)

    return FusedControlNetwork(arch, fusion, trunk_stacks, head_stack,
                               branch_stacks, branch_points, fusion_stack)
