import logging
from collections import OrderedDict

import numpy as np

from . import tensorops as ops
from .med3derrors import DuplicateBranch, InvalidDepth, ShapeMismatch, UnknownDomain
from .normalizevolumes import foreground_bbox
from .tensorops import Tensor
from .volumeobj import LabelGrid

logger = logging.getLogger(__name__)

# depth -> (block, blocks per stage)

RESNET_LAYOUT = {
    10: ('basic', (1, 1, 1, 1)),
    18: ('basic', (2, 2, 2, 2)),
    34: ('basic', (3, 4, 6, 3)),
    50: ('bottleneck', (3, 4, 6, 3)),
    101: ('bottleneck', (3, 4, 23, 3)),
    152: ('bottleneck', (3, 8, 36, 3)),
    200: ('bottleneck', (3, 24, 36, 3)),
}

EXPANSION = {'basic': 1, 'bottleneck': 4}


class ModelConfig(object):

    def __init__(self, depth=10, branch_specs=(), seed=0, base_width=64, dilation_rate=2, dilated=True,
                 in_channels=1):

        if depth not in RESNET_LAYOUT:
            raise InvalidDepth('depth must be one of {}, got {}'.format(sorted(RESNET_LAYOUT), depth))
        if in_channels != 1:
            raise ValueError('volumes are single channel, in_channels must be 1')

        self.depth = int(depth)
        self.block = RESNET_LAYOUT[depth][0]
        self.layers = RESNET_LAYOUT[depth][1]
        self.in_channels = 1
        self.dilation_rate = int(dilation_rate)
        self.dilated = bool(dilated)
        self.branch_specs = [(int(d), int(c)) for d, c in branch_specs]
        self.seed = int(seed)
        self.base_width = int(base_width)

    @property
    def encoder_channels(self):

        return 8 * self.base_width * EXPANSION[self.block]

    def metadata(self):

        return OrderedDict([('depth', str(self.depth)), ('block', self.block),
                            ('in_channels', str(self.in_channels)), ('base_width', str(self.base_width)),
                            ('dilated', '1' if self.dilated else '0'),
                            ('dilation_rate', str(self.dilation_rate))])


# Modules

class Module(object):

    """Ordered container of parameters, buffers and child modules.

    Names follow the attribute path, e.g. encoder.layer3.0.conv2.weight.
    """

    def __init__(self):

        self._entries = []
        self.training = True

    def add_param(self, name, data):

        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self._entries.append(('param', name, t))
        setattr(self, name, t)
        return t

    def add_buffer(self, name, data):

        arr = np.asarray(data, dtype=np.float32).copy()
        self._entries.append(('buffer', name, arr))
        setattr(self, name, arr)
        return arr

    def add_module(self, name, module):

        self._entries.append(('module', name, module))
        setattr(self, name, module)
        return module

    def named_state(self, prefix=''):

        """(name, kind, value) in construction order; kind is param or buffer."""

        for kind, name, value in self._entries:
            full = prefix + name
            if kind == 'module':
                for item in value.named_state(full + '.'):
                    yield item
            else:
                yield full, kind, value

    def named_parameters(self, prefix=''):

        return [(name, value) for name, kind, value in self.named_state(prefix) if kind == 'param']

    def named_buffers(self, prefix=''):

        return [(name, value) for name, kind, value in self.named_state(prefix) if kind == 'buffer']

    def parameter_count(self):

        return sum(p.size for _, p in self.named_parameters())

    def train(self, mode=True):

        self.training = mode
        for kind, _, value in self._entries:
            if kind == 'module':
                value.train(mode)
        return self

    def eval(self):

        return self.train(False)


def he_normal(rng, shape, fan_in):

    return rng.normal(0., np.sqrt(2. / fan_in), size=shape).astype(np.float32)


class Conv3d(Module):

    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, dilation=1, bias=False):

        super().__init__()
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.add_param('weight', he_normal(rng, (c_out, c_in, kernel, kernel, kernel), c_in * kernel ** 3))
        self.has_bias = bias
        if bias:
            self.add_param('bias', np.zeros(c_out))

    def __call__(self, x):

        out = ops.conv3d(x, self.weight, self.stride, self.padding, self.dilation)
        if self.has_bias:
            out = ops.add_channel_bias(out, self.bias)
        return out


class ConvTranspose3d(Module):

    def __init__(self, rng, c_in, c_out, kernel=3, stride=2, padding=1, output_padding=1):

        super().__init__()
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.add_param('weight', he_normal(rng, (c_in, c_out, kernel, kernel, kernel), c_in * kernel ** 3))

    def __call__(self, x):

        return ops.conv_transpose3d(x, self.weight, self.stride, self.padding, self.output_padding)


class BatchNorm3d(Module):

    def __init__(self, channels, momentum=0.1, eps=1e-5):

        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param('weight', np.ones(channels))
        self.add_param('bias', np.zeros(channels))
        self.add_buffer('running_mean', np.zeros(channels))
        self.add_buffer('running_var', np.ones(channels))

    def __call__(self, x):

        return ops.batchnorm3d(x, self.weight, self.bias, self.running_mean, self.running_var,
                               training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):

    def __init__(self, rng, n_in, n_out):

        super().__init__()
        self.add_param('weight', he_normal(rng, (n_in, n_out), n_in))
        self.add_param('bias', np.zeros(n_out))

    def __call__(self, x):

        return ops.linear(x, self.weight, self.bias)


class ConvBnRelu(Module):

    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, dilation=1, relu=True):

        super().__init__()
        self.relu = relu
        self.add_module('conv', Conv3d(rng, c_in, c_out, kernel, stride, padding, dilation))
        self.add_module('bn', BatchNorm3d(c_out))

    def __call__(self, x):

        out = self.bn(self.conv(x))
        return ops.relu(out) if self.relu else out


# Residual encoder

class BasicBlock(Module):

    def __init__(self, rng, inplanes, planes, stride=1, dilation=1):

        super().__init__()
        self.add_module('conv1', Conv3d(rng, inplanes, planes, 3, stride, dilation, dilation))
        self.add_module('bn1', BatchNorm3d(planes))
        self.add_module('conv2', Conv3d(rng, planes, planes, 3, 1, dilation, dilation))
        self.add_module('bn2', BatchNorm3d(planes))
        self.downsample = None
        if stride != 1 or inplanes != planes:
            self.downsample = self.add_module('downsample', ConvBnRelu(rng, inplanes, planes, 1, stride, relu=False))

    def __call__(self, x):

        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        residual = x if self.downsample is None else self.downsample(x)

        return ops.relu(ops.add(out, residual))


class Bottleneck(Module):

    def __init__(self, rng, inplanes, planes, stride=1, dilation=1):

        super().__init__()
        self.add_module('conv1', Conv3d(rng, inplanes, planes, 1))
        self.add_module('bn1', BatchNorm3d(planes))
        self.add_module('conv2', Conv3d(rng, planes, planes, 3, stride, dilation, dilation))
        self.add_module('bn2', BatchNorm3d(planes))
        self.add_module('conv3', Conv3d(rng, planes, planes * 4, 1))
        self.add_module('bn3', BatchNorm3d(planes * 4))
        self.downsample = None
        if stride != 1 or inplanes != planes * 4:
            self.downsample = self.add_module('downsample',
                                              ConvBnRelu(rng, inplanes, planes * 4, 1, stride, relu=False))

    def __call__(self, x):

        out = ops.relu(self.bn1(self.conv1(x)))
        out = ops.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        residual = x if self.downsample is None else self.downsample(x)

        return ops.relu(ops.add(out, residual))


class Stage(Module):

    def __init__(self, rng, block, inplanes, planes, blocks, stride, dilation):

        super().__init__()
        block_cls = BasicBlock if block == 'basic' else Bottleneck
        self.blocks = []
        for i in range(blocks):
            b = block_cls(rng, inplanes, planes, stride if i == 0 else 1, dilation)
            self.blocks.append(self.add_module(str(i), b))
            inplanes = planes * EXPANSION[block]

    def __call__(self, x):

        for b in self.blocks:
            x = b(x)
        return x


class ResNetEncoder(Module):

    """3D ResNet with a single-channel 7x7x7 stem.

    Dilated (pre-training) variant: stages 3 and 4 keep stride 1 and dilate their 3x3x3
    convolutions, output stride 8. Undilated (coarse) variant: canonical strides, output stride 32.
    """

    def __init__(self, cfg, rng):

        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        exp = EXPANSION[cfg.block]

        self.add_module('conv1', Conv3d(rng, cfg.in_channels, w, 7, stride=2, padding=3))
        self.add_module('bn1', BatchNorm3d(w))

        if cfg.dilated:
            strides = (1, 2, 1, 1)
            dilations = (1, 1, cfg.dilation_rate, cfg.dilation_rate)
        else:
            strides = (1, 2, 2, 2)
            dilations = (1, 1, 1, 1)

        inplanes = w
        self.stages = []
        for i in range(4):
            planes = w * 2 ** i
            stage = Stage(rng, cfg.block, inplanes, planes, cfg.layers[i], strides[i], dilations[i])
            self.stages.append(self.add_module('layer{}'.format(i + 1), stage))
            inplanes = planes * exp

        self.out_channels = inplanes

    @property
    def output_stride(self):

        return 8 if self.cfg.dilated else 32

    def __call__(self, x):

        x = ops.relu(self.bn1(self.conv1(x)))
        x = ops.maxpool3d(x, 3, 2, 1)
        for stage in self.stages:
            x = stage(x)
        return x


def build_encoder(cfg):

    rng = np.random.default_rng(cfg.seed)

    return ResNetEncoder(cfg, rng)


# Pre-training decoder

class Branch(Module):

    """One 1x1x1 convolution with bias, upsampled to the input extents."""

    def __init__(self, rng, c_in, classes):

        super().__init__()
        self.classes = classes
        self.add_param('weight', he_normal(rng, (classes, c_in, 1, 1, 1), c_in))
        self.add_param('bias', np.zeros(classes))

    def __call__(self, features, size):

        out = ops.add_channel_bias(ops.conv3d(features, self.weight), self.bias)
        return ops.trilinear_upsample(out, size)


class MultiBranchDecoder(Module):

    def __init__(self, rng, c_in, branch_specs):

        super().__init__()
        if not branch_specs:
            raise ValueError('at least one decoder branch is required')

        self.branches = OrderedDict()
        for domain_id, classes in branch_specs:
            if domain_id in self.branches:
                raise DuplicateBranch('domain {} has two branches'.format(domain_id))
            self.branches[domain_id] = self.add_module('branch{}'.format(domain_id), Branch(rng, c_in, classes))

    def branch_prefix(self, domain_id):

        return 'decoder.branch{}.'.format(domain_id)


def build_multibranch_decoder(encoder, branch_specs, seed=None):

    seed = encoder.cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])

    return MultiBranchDecoder(rng, encoder.out_channels, list(branch_specs))


class Med3DNet(Module):

    def __init__(self, encoder, decoder):

        super().__init__()
        self.cfg = encoder.cfg
        self.add_module('encoder', encoder)
        self.add_module('decoder', decoder)

    def encoder_parameters(self):

        return self.encoder.named_parameters('encoder.')

    def routed_parameters(self, domain_id):

        """Encoder parameters plus the parameters of the one branch domain_id trains."""

        if domain_id not in self.decoder.branches:
            raise UnknownDomain('no decoder branch for domain {}'.format(domain_id))

        return self.encoder_parameters() + self.decoder.branches[domain_id].named_parameters(
            self.decoder.branch_prefix(domain_id))


def build_med3d(cfg):

    encoder = build_encoder(cfg)
    decoder = build_multibranch_decoder(encoder, cfg.branch_specs)

    return Med3DNet(encoder, decoder)


def forward_pretrain(model, batch, domain_id):

    if domain_id not in model.decoder.branches:
        raise UnknownDomain('no decoder branch for domain {}'.format(domain_id))

    features = model.encoder(batch)

    return model.decoder.branches[domain_id](features, batch.shape[2:])


# Transfer heads

class SegHead(Module):

    """Three (transposed conv, conv) groups, each doubling the extents, then a 1x1x1 classifier."""

    def __init__(self, rng, c_in, num_classes, width=256):

        super().__init__()
        self.num_classes, self.width = num_classes, width
        plan = [(c_in, width, width // 2), (width // 2, width // 2, width // 4), (width // 4, width // 4, width // 8)]

        self.groups = []
        for i, (cin, c_up, c_out) in enumerate(plan):
            group = Module()
            group.add_module('up', ConvTranspose3d(rng, cin, c_up, 3, 2, 1, 1))
            group.add_module('up_bn', BatchNorm3d(c_up))
            group.add_module('conv', ConvBnRelu(rng, c_up, c_out, 3, padding=1))
            self.groups.append(self.add_module('group{}'.format(i + 1), group))

        self.add_module('classifier', Conv3d(rng, width // 8, num_classes, 1, bias=True))

    def __call__(self, features, size):

        x = features
        for group in self.groups:
            x = ops.relu(group.up_bn(group.up(x)))
            x = group.conv(x)
        x = self.classifier(x)

        if x.shape[2:] != tuple(size):
            x = ops.trilinear_upsample(x, size)

        return x


class ClsHead(Module):

    def __init__(self, rng, c_in, num_classes):

        super().__init__()
        self.num_classes = num_classes
        self.add_module('fc', Linear(rng, c_in, num_classes))

    def __call__(self, features, size=None):

        return self.fc(ops.global_avgpool(features))


class TransferNet(Module):

    """Encoder followed by one task head; task is seg, cls or coarse."""

    def __init__(self, encoder, head, task):

        super().__init__()
        self.cfg = encoder.cfg
        self.task = task
        self.num_classes = head.num_classes
        self.decoder_width = getattr(head, 'width', None)
        self.frozen = False
        self.add_module('encoder', encoder)
        self.add_module('head', head)

    def train(self, mode=True):

        super().train(mode)
        if self.frozen:
            self.encoder.train(False)
        return self

    def encoder_parameters(self):

        return self.encoder.named_parameters('encoder.')

    def head_parameters(self):

        return self.head.named_parameters('head.')

    def __call__(self, x):

        return self.head(self.encoder(x), x.shape[2:])


def build_seg_head(encoder, num_classes, width=256, seed=None):

    seed = encoder.cfg.seed if seed is None else seed

    return SegHead(np.random.default_rng([seed, 2]), encoder.out_channels, num_classes, width)


def build_cls_head(encoder, num_classes, seed=None):

    seed = encoder.cfg.seed if seed is None else seed

    return ClsHead(np.random.default_rng([seed, 3]), encoder.out_channels, num_classes)


def build_transfer_model(cfg, task, num_classes, decoder_width=256):

    encoder = build_encoder(cfg)

    if task == 'seg':
        head = build_seg_head(encoder, num_classes, decoder_width)
    elif task == 'cls':
        head = build_cls_head(encoder, num_classes)
    else:
        raise ValueError('task must be seg or cls')

    return TransferNet(encoder, head, task)


class CoarseHead(Module):

    def __init__(self, rng, c_in, num_classes=2):

        super().__init__()
        self.num_classes = num_classes
        self.add_module('classifier', Conv3d(rng, c_in, num_classes, 1, bias=True))

    def __call__(self, features, size):

        return ops.trilinear_upsample(self.classifier(features), size)


def build_coarse_model(cfg):

    """Undilated encoder (output stride 32) with a two-class 1x1x1 head upsampled to the input."""

    coarse_cfg = ModelConfig(depth=cfg.depth, seed=cfg.seed, base_width=cfg.base_width, dilated=False)
    encoder = build_encoder(coarse_cfg)
    head = CoarseHead(np.random.default_rng([coarse_cfg.seed, 4]), encoder.out_channels)

    return TransferNet(encoder, head, 'coarse')


def predict_labels(logits):

    """Arg-max class per voxel (or per sample for N x C logits)."""

    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)

    return np.argmax(data, axis=1)


def coarse_roi_extract(coarse_output, vol, labels=None, expand=(0., 0.3), seed=0):

    """Crop the predicted foreground box, grown per axis by a random fraction of its extent.

    coarse_output is either N x C x D x H x W logits (first sample used) or a 3D mask.
    An empty prediction returns the whole volume.
    """

    if expand[0] < 0 or expand[0] > expand[1]:
        raise ValueError('expand range must be non-negative and ordered')

    data = coarse_output.data if isinstance(coarse_output, Tensor) else np.asarray(coarse_output)
    mask = predict_labels(data)[0] > 0 if data.ndim == 5 else data > 0

    if mask.shape != vol.shape:
        raise ShapeMismatch('coarse mask {} does not match volume {}'.format(mask.shape, vol.shape))

    bbox = foreground_bbox(LabelGrid(mask.astype(np.uint8), 2))
    if bbox is None:
        logger.info('Coarse prediction is empty, keeping the whole volume')
        return vol, labels

    rng = np.random.default_rng(seed)
    window = []
    for a in range(3):
        lo, hi = bbox[0][a], bbox[1][a]
        grow = int(round(rng.uniform(expand[0], expand[1]) * (hi - lo)))
        window.append(slice(max(0, lo - grow), min(vol.shape[a], hi + grow)))
    window = tuple(window)

    crop = vol.replace(voxels=vol.voxels[window])
    crop_labels = labels.replace(labels.labels[window]) if labels is not None else None

    return crop, crop_labels
