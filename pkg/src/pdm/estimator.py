"""scikit-learn style wrapper: fit on feature maps, transform to retrieval descriptors."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from pdm.evalkit import RetrievalProtocol, cmc_map
from pdm.trainer import TrainConfig, embed, train
from pdm.validation import check_maps, check_modalities, check_training_data


class PDMEstimator(BaseEstimator, TransformerMixin):
    """Backbone stub + MFGM + PLM trained with the joint objective.

    ``fit(X, y, modalities)`` takes maps of shape (N, C, H, W), identity
    labels (any hashable values) and modality labels (0 visible, 1
    infrared). ``transform`` returns the (m+1)*C descriptors, or C-dim
    global features when ``use_plm=False``. ``score`` is cross-modal mAP.
    """

    def __init__(
        self,
        epochs=30,
        prototypes=10,
        branches=2,
        reduction=4,
        momentum=0.9,
        weight_decay=5e-3,
        alpha=0.3,
        rho1=0.1,
        rho2=1.0,
        margin=0.3,
        ids_per_batch=4,
        samples_per_id=4,
        ch_variant="prose",
        use_mfgm=True,
        use_plm=True,
        use_ch=True,
        use_dcs=True,
        random_state=0,
    ):
        self.epochs = epochs
        self.prototypes = prototypes
        self.branches = branches
        self.reduction = reduction
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.rho1 = rho1
        self.rho2 = rho2
        self.margin = margin
        self.ids_per_batch = ids_per_batch
        self.samples_per_id = samples_per_id
        self.ch_variant = ch_variant
        self.use_mfgm = use_mfgm
        self.use_plm = use_plm
        self.use_ch = use_ch
        self.use_dcs = use_dcs
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, prototypes=self.prototypes,
            branches=self.branches if self.use_mfgm else 0, reduction=self.reduction,
            momentum=self.momentum, weight_decay=self.weight_decay,
            alpha=self.alpha, rho1=self.rho1, rho2=self.rho2, margin=self.margin,
            ids_per_batch=self.ids_per_batch, samples_per_id=self.samples_per_id,
            seed=self.random_state, ch_variant=self.ch_variant,
            use_mfgm=self.use_mfgm, use_plm=self.use_plm, use_ch=self.use_ch, use_dcs=self.use_dcs,
        )

    def fit(self, X, y, modalities=None):
        X, y, modalities = check_training_data(X, y, modalities)
        self.label_encoder_ = LabelEncoder().fit(y)
        data = SimpleNamespace(maps=X, labels=self.label_encoder_.transform(y), modalities=modalities)
        self.state_, self.history_ = train(self._train_config(), data)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.n_channels_ = X.shape[1]
        self.classes_ = self.label_encoder_.classes_
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        return embed(self.state_, check_maps(X, self.n_channels_))

    def score(self, X, y, modalities=None, direction="ir2vis"):
        """Cross-modal mAP with one modality as queries and the other as gallery."""
        X = check_maps(X, self.n_channels_)
        modalities = check_modalities(modalities, len(X))
        protocol = RetrievalProtocol.from_split(self.transform(X), np.asarray(y), modalities, direction)
        return cmc_map(protocol).map
