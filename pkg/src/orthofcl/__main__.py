from orthofcl.cli import main

main()
