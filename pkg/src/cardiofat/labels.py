"""Label codes shared by the whole pipeline.

0 is reserved for background everywhere; a label grid must be 0 exactly
where the fat-windowed slice is 0.
"""

BACKGROUND = 0
EPICARDIAL = 1
MEDIASTINAL = 2
PERICARDIUM = 3
HYBRID = 4
UNCLASSIFIED = 5

LABEL_NAMES = {
    BACKGROUND: "background",
    EPICARDIAL: "epicardial",
    MEDIASTINAL: "mediastinal",
    PERICARDIUM: "pericardium",
    HYBRID: "hybrid",
    UNCLASSIFIED: "unclassified",
}

NAME_TO_LABEL = {v: k for k, v in LABEL_NAMES.items()}

# Classes a ground-truth mask may contain (plus background).
TISSUE_CLASSES = (EPICARDIAL, MEDIASTINAL, PERICARDIUM)

# Strict rendering palette: black, red, green, blue, yellow, white.
PALETTE = {
    BACKGROUND: (0, 0, 0),
    EPICARDIAL: (255, 0, 0),
    MEDIASTINAL: (0, 255, 0),
    PERICARDIUM: (0, 0, 255),
    HYBRID: (255, 255, 0),
    UNCLASSIFIED: (255, 255, 255),
}

COLOR_TO_LABEL = {v: k for k, v in PALETTE.items()}
