"""Building function labeling from POIs and footprints, with BFMI evaluation."""
