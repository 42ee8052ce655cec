# Control-channel blueprints of a replica process.
