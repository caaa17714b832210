from app.storage.artifact_repository import ArtifactRepository
from app.storage.texture_repository import TextureRepository

__all__ = [
    "ArtifactRepository",
    "TextureRepository",
]
