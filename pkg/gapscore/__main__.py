from gapscore.cli import main

main()
