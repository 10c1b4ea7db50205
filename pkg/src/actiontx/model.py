import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .backbone import SPATIAL_STRIDE, LocationEmbedding, LocationEmbeddingConfig, Trunk
from .backbone import append_embedding, slice_center
from .config import ExperimentConfig
from .geometry import Box, Detection, clip_boxes, decode_deltas_array, make_anchors, nms
from .i3d_head import I3DHead
from .layers import EVAL, Initializer, Module, RunContext
from .pooling import roipool, st_roipool
from .rpn import ProposalSet, RegionProposalNetwork, select_proposals, sigmoid
from .tensor import Tensor
from .tx_head import AttentionTrace, HeadOutput, TxConfig, TxHead, combine_head_outputs


ModelParams = Dict[str, Tensor]


def normalize_frames(frames: np.ndarray, dtype="float32") -> np.ndarray:
    """uint8 pixels to ``[-1, 1]``."""
    return (np.asarray(frames, dtype=np.float64) / 127.5 - 1.0).astype(dtype)


@dataclass
class DetectionResult:
    detections: List[Detection]
    proposals: ProposalSet
    trace: Optional[AttentionTrace] = None
    kept: Optional[np.ndarray] = None
    memory: Optional[Tensor] = None


class ActionDetector(Module):
    """Trunk, location embedding, proposal network and the configured head(s).

    ``model.head`` selects ``tx``, ``i3d`` or ``tx+i3d``; in the combined mode
    both heads are trained and inference takes classification from the
    attention head and box regression from the I3D head.
    """

    def __init__(self, config: ExperimentConfig):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.config = config
        model = config.model
        init = Initializer(model.seed, model.dtype)
        self.dtype = np.dtype(model.dtype)
        self.num_classes = config.num_classes

        self.trunk = Trunk(init, model.trunk_channels)
        self.embedding = LocationEmbedding(init, LocationEmbeddingConfig(
            model.embedding_hidden, model.embedding_hidden, model.embedding_channels
        ))
        self.features_width = self.trunk.out_channels + self.embedding.channels
        self.num_anchors = len(model.anchor_scales) * len(model.anchor_ratios)
        self.rpn = RegionProposalNetwork(init, self.features_width, model.rpn_channels,
                                         self.num_anchors)

        agnostic = model.class_agnostic_regression
        self.tx_head = None
        self.i3d_head = None
        if model.head in ("tx", "tx+i3d"):
            self.tx_config = TxConfig(
                d_model=model.d_model, value_dim=model.d_model, heads=model.heads,
                layers=model.layers, dropout=model.dropout, ffn_hidden=model.ffn_hidden,
                qpr=model.qpr, qpr_channels=model.qpr_channels,
            )
            self.tx_head = TxHead(init, self.features_width, self.num_classes, self.tx_config,
                                  agnostic)
        if model.head in ("i3d", "tx+i3d"):
            self.i3d_head = I3DHead(init, self.features_width, self.num_classes,
                                    model.i3d_channels, agnostic)

    def prepare_clip(self, frames: np.ndarray) -> Tensor:
        return Tensor(normalize_frames(frames, self.dtype))

    def features(self, clip: Tensor) -> Tensor:
        trunk = self.trunk(clip)
        return append_embedding(trunk, self.embedding(*trunk.shape[:3]))

    def anchors(self, feature_h: int, feature_w: int) -> np.ndarray:
        model = self.config.model
        return make_anchors(feature_h, feature_w, SPATIAL_STRIDE, model.anchor_scales,
                            model.anchor_ratios)

    def image_size(self, memory: Tensor):
        return memory.shape[2] * SPATIAL_STRIDE, memory.shape[1] * SPATIAL_STRIDE

    def propose(self, memory: Tensor) -> ProposalSet:
        center = slice_center(memory)
        logits, deltas = self.rpn(center)
        return select_proposals(
            logits.data, deltas.data, self.anchors(*center.shape[:2]),
            self.config.model.proposals, self.image_size(memory), self.config.model.rpn_nms_iou,
        )

    def head_outputs(self, boxes: np.ndarray, memory: Tensor, ctx: RunContext = EVAL):
        """Run every configured head on `boxes`.

        Returns ``({head name: HeadOutput}, trace)``; the trace is None without
        an attention head.
        """
        outputs, trace = {}, None
        if self.tx_head is not None:
            roi = roipool(slice_center(memory), boxes, SPATIAL_STRIDE)
            outputs["tx"], trace = self.tx_head(roi, memory, ctx)
        if self.i3d_head is not None:
            outputs["i3d"] = self.i3d_head(st_roipool(memory, boxes, SPATIAL_STRIDE))
        return outputs, trace

    def route(self, outputs: Dict[str, HeadOutput]) -> HeadOutput:
        if "tx" in outputs and "i3d" in outputs:
            return combine_head_outputs(outputs["tx"], outputs["i3d"])
        return outputs.get("tx") or outputs["i3d"]

    def detect(self, frames: np.ndarray, proposals: Optional[np.ndarray] = None,
               keep_memory=False) -> DetectionResult:
        """Detect people and score their actions at the keyframe of `frames`.

        Given `proposals` (ground-truth boxes), the proposal network is skipped.
        """
        evaluation = self.config.eval
        memory = self.features(self.prepare_clip(frames))
        if proposals is None:
            proposal_set = self.propose(memory)
        else:
            proposal_set = ProposalSet.from_boxes(proposals)
        if len(proposal_set) == 0:
            return DetectionResult([], proposal_set, None, np.zeros(0, dtype=int),
                                   memory if keep_memory else None)

        outputs, trace = self.head_outputs(proposal_set.boxes, memory)
        routed = self.route(outputs)
        probabilities = sigmoid(routed.logits.data)
        actions, background = probabilities[:, :-1], probabilities[:, -1]

        width, height = self.image_size(memory)
        deltas = routed.deltas.data.astype(np.float64)
        if routed.class_agnostic:
            boxes = clip_boxes(decode_deltas_array(proposal_set.boxes, deltas), width, height)
            class_boxes = None
        else:
            per_class = deltas.reshape(len(proposal_set), self.num_classes, 4)
            repeated = np.repeat(proposal_set.boxes, self.num_classes, axis=0)
            class_boxes = clip_boxes(
                decode_deltas_array(repeated, per_class.reshape(-1, 4)), width, height
            ).reshape(len(proposal_set), self.num_classes, 4)
            boxes = class_boxes[np.arange(len(proposal_set)), actions.argmax(axis=1)]

        kept = np.asarray(nms(boxes, 1.0 - background, evaluation.nms_iou), dtype=int)
        kept = kept[:evaluation.max_detections]
        detections = [
            Detection(
                Box.from_array(boxes[i]), actions[i], float(proposal_set.scores[i]),
                float(background[i]), None if class_boxes is None else class_boxes[i],
            )
            for i in kept
        ]
        self.logger.debug("%d proposals, %d detections", len(proposal_set), len(detections))
        return DetectionResult(detections, proposal_set, trace, kept,
                               memory if keep_memory else None)
