# Domain data types: scenes, cameras, images, volumes, network parameters
