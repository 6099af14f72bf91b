#!/usr/bin/env python3
"""Regenerates the bundled CNN descriptors in ./cnns from the public
architecture definitions. Only convolution layers are emitted.

    python3 generate_cnns.py
"""

import json
import math
import os


class Net:
    def __init__(self, name):
        self.name = name
        self.layers = []

    def conv(self, kind, filters, k, in_ch, ifm, stride=1, residual=(), ofm=None):
        idx = len(self.layers) + 1
        layer = {
            "index": idx,
            "kind": kind,
            "filters": filters,
            "kernel": [k, k],
            "in_channels": in_ch,
            "ifm": [ifm, ifm],
            "stride": stride,
            "residual_sources": sorted(set(residual)),
        }
        if ofm is not None and ofm != math.ceil(ifm / stride):
            layer["ofm"] = [ofm, ofm]
        self.layers.append(layer)
        return idx

    def dump(self, path):
        with open(path, "w") as f:
            f.write("{\n")
            f.write(f'  "name": "{self.name}",\n')
            f.write('  "word_bytes": 1,\n')
            f.write('  "layers": [\n')
            for i, layer in enumerate(self.layers):
                sep = "," if i + 1 < len(self.layers) else ""
                f.write("    " + json.dumps(layer) + sep + "\n")
            f.write("  ]\n}\n")


def resnet(name, blocks):
    net = Net(name)
    prev = net.conv("standard", 64, 7, 3, 224, 2)
    ch, size = 64, 56
    for stage, (n, width) in enumerate(zip(blocks, [64, 128, 256, 512])):
        for b in range(n):
            stride = 2 if (b == 0 and stage > 0) else 1
            block_in = prev
            c1 = net.conv("pointwise", width, 1, ch, size)
            c2 = net.conv("standard", width, 3, width, size, stride)
            out = math.ceil(size / stride)
            if b == 0:
                c3 = net.conv("pointwise", width * 4, 1, width, out)
                prev = net.conv("pointwise", width * 4, 1, ch, size, stride, residual=[block_in, c3])
            else:
                prev = net.conv("pointwise", width * 4, 1, width, out, residual=[block_in])
            ch, size = width * 4, out
    return net


def xception():
    net = Net("xception")
    net.conv("standard", 32, 3, 3, 299, 2, ofm=149)
    prev = net.conv("standard", 64, 3, 32, 149, ofm=147)
    ch, size = 64, 147

    def sep(in_ch, out_ch, sz, residual=()):
        net.conv("depthwise", in_ch, 3, in_ch, sz)
        return net.conv("pointwise", out_ch, 1, in_ch, sz, residual=residual)

    for out in (128, 256, 728):
        block_in = prev
        sep(ch, out, size)
        last = sep(out, out, size)
        pooled = math.ceil(size / 2)
        prev = net.conv("pointwise", out, 1, ch, size, 2, residual=[block_in, last])
        ch, size = out, pooled
    for _ in range(8):
        block_in = prev
        sep(728, 728, size)
        sep(728, 728, size)
        prev = sep(728, 728, size, residual=[block_in])
    block_in = prev
    sep(728, 728, size)
    last = sep(728, 1024, size)
    prev = net.conv("pointwise", 1024, 1, 728, size, 2, residual=[block_in, last])
    size = math.ceil(size / 2)
    sep(1024, 1536, size)
    sep(1536, 2048, size)
    return net


def densenet121():
    net = Net("densenet121")
    prev = net.conv("standard", 64, 7, 3, 224, 2)
    ch, size = 64, 56
    growth = 32
    for bi, n in enumerate((6, 12, 24, 16)):
        sources = [prev]
        for _ in range(n):
            net.conv("pointwise", 4 * growth, 1, ch, size, residual=sources)
            out = net.conv("standard", growth, 3, 4 * growth, size)
            sources = sources + [out]
            ch += growth
        if bi < 3:
            prev = net.conv("pointwise", ch // 2, 1, ch, size, residual=sources)
            ch, size = ch // 2, size // 2
    return net


def mobilenet_v2():
    net = Net("mobilenetv2")
    prev = net.conv("standard", 32, 3, 3, 224, 2)
    ch, size = 32, 112
    cfg = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
           (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    for t, c, n, s in cfg:
        for i in range(n):
            stride = s if i == 0 else 1
            block_in = prev
            hidden = ch * t
            if t != 1:
                net.conv("pointwise", hidden, 1, ch, size)
            net.conv("depthwise", hidden, 3, hidden, size, stride)
            size = math.ceil(size / stride)
            residual = [block_in] if (stride == 1 and ch == c) else []
            prev = net.conv("pointwise", c, 1, hidden, size, residual=residual)
            ch = c
    net.conv("pointwise", 1280, 1, ch, size)
    return net


if __name__ == "__main__":
    here = os.path.join(os.path.dirname(os.path.abspath(__file__)), "cnns")
    os.makedirs(here, exist_ok=True)
    for net in (resnet("resnet50", [3, 4, 6, 3]), resnet("resnet152", [3, 8, 36, 3]),
                xception(), densenet121(), mobilenet_v2()):
        net.dump(os.path.join(here, net.name + ".json"))
        print(net.name, len(net.layers))
