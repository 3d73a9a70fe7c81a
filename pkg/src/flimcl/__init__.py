"""Data-centric curation toolkit for point-level FLIm data with margin-level labels."""
