from linkmpc.main import main

main()
